#![allow(dead_code)]

use bdl_core::sim::{BallState, EnvContext};

/// Fixed-step reference integrator. Each step of `dt` is advanced whole
/// unless a contact occurs inside it; contacts are located by bisection on
/// the gap function and resolved before the rest of the step.
pub struct SubstepOracle {
    pub dt: f64,
}

#[derive(Clone, Copy)]
enum Contact {
    Wall { ball: usize, x_axis: bool },
    Pair(usize, usize),
}

/// Wall lines `(x_axis, contact coordinate, sign)`; the ball must keep
/// `sign * (p - coordinate) >= 0`.
fn walls(ctx: &EnvContext, b: &BallState) -> Vec<(bool, f64, f64)> {
    let r = b.radius;
    let bd = ctx.borders;
    let mut out = vec![
        (true, bd.left as f64 + r, 1.0),
        (true, ctx.width as f64 - bd.right as f64 - r, -1.0),
        (false, bd.top as f64 + r, 1.0),
        (false, ctx.height as f64 - bd.bottom as f64 - r, -1.0),
    ];
    if let Some(s) = ctx.split {
        let half = s.width as f64 / 2.0;
        let c = s.center_x as f64;
        if b.center.0 < c {
            out.push((true, c - half - r, -1.0));
        } else {
            out.push((true, c + half + r, 1.0));
        }
    }
    out
}

fn moved(b: &BallState, t: f64) -> (f64, f64) {
    (b.center.0 + b.velocity.0 * t, b.center.1 + b.velocity.1 * t)
}

/// Smallest `t` in `(0, hi]` where `violated` turns true, assuming it is
/// false at 0 and true at `hi`.
fn bisect(hi: f64, violated: impl Fn(f64) -> bool) -> f64 {
    let (mut lo, mut hi) = (0.0, hi);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if violated(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

impl SubstepOracle {
    /// Centres at every integer time `0..n_frames`.
    pub fn run(&self, ctx: &EnvContext, start: &[BallState], n_frames: usize) -> Vec<Vec<(f64, f64)>> {
        let steps = (1.0 / self.dt).round() as usize;
        let mut balls = start.to_vec();
        let mut out = vec![balls.iter().map(|b| b.center).collect::<Vec<_>>()];
        for _ in 1..n_frames {
            for _ in 0..steps {
                self.advance(ctx, &mut balls, self.dt);
            }
            out.push(balls.iter().map(|b| b.center).collect());
        }
        out
    }

    fn advance(&self, ctx: &EnvContext, balls: &mut [BallState], dt: f64) {
        let mut left = dt;
        for _ in 0..64 {
            let mut first: Option<(f64, Contact)> = None;
            let mut offer = |t: f64, c: Contact| {
                if first.is_none_or(|(ft, _)| t < ft) {
                    first = Some((t, c));
                }
            };
            for (i, b) in balls.iter().enumerate() {
                for (x_axis, line, sign) in walls(ctx, b) {
                    let pos = |t: f64| if x_axis { moved(b, t).0 } else { moved(b, t).1 };
                    let vel = if x_axis { b.velocity.0 } else { b.velocity.1 };
                    if sign * vel < 0.0 && sign * (pos(left) - line) < 0.0 {
                        let t = if sign * (pos(0.0) - line) <= 0.0 { 0.0 } else { bisect(left, |t| sign * (pos(t) - line) < 0.0) };
                        offer(t, Contact::Wall { ball: i, x_axis });
                    }
                }
                for (j, o) in balls.iter().enumerate().skip(i + 1) {
                    let reach = b.radius + o.radius;
                    let gap = |t: f64| {
                        let (p, q) = (moved(b, t), moved(o, t));
                        (p.0 - q.0).hypot(p.1 - q.1) - reach
                    };
                    let closing = {
                        let (dx, dy) = (o.center.0 - b.center.0, o.center.1 - b.center.1);
                        let (dvx, dvy) = (o.velocity.0 - b.velocity.0, o.velocity.1 - b.velocity.1);
                        dx * dvx + dy * dvy < 0.0
                    };
                    // The gap is convex in t, so a sign change at either end or a
                    // minimum below zero inside the step marks a contact.
                    if closing {
                        let t_min = {
                            let (dx, dy) = (o.center.0 - b.center.0, o.center.1 - b.center.1);
                            let (dvx, dvy) = (o.velocity.0 - b.velocity.0, o.velocity.1 - b.velocity.1);
                            (-(dx * dvx + dy * dvy) / (dvx * dvx + dvy * dvy)).clamp(0.0, left)
                        };
                        if gap(t_min) < 0.0 {
                            let t = if gap(0.0) <= 0.0 { 0.0 } else { bisect(t_min, |t| gap(t) < 0.0) };
                            offer(t, Contact::Pair(i, j));
                        }
                    }
                }
            }
            let Some((t, contact)) = first else {
                for b in balls.iter_mut() {
                    b.center = moved(b, left);
                }
                return;
            };
            for b in balls.iter_mut() {
                b.center = moved(b, t);
            }
            left -= t;
            match contact {
                Contact::Wall { ball, x_axis: true } => balls[ball].velocity.0 = -balls[ball].velocity.0,
                Contact::Wall { ball, x_axis: false } => balls[ball].velocity.1 = -balls[ball].velocity.1,
                Contact::Pair(i, j) => {
                    let (a, b) = (balls[i], balls[j]);
                    let (nx, ny) = (b.center.0 - a.center.0, b.center.1 - a.center.1);
                    let norm = nx.hypot(ny);
                    let (nx, ny) = (nx / norm, ny / norm);
                    let va = a.velocity.0 * nx + a.velocity.1 * ny;
                    let vb = b.velocity.0 * nx + b.velocity.1 * ny;
                    let d = vb - va;
                    balls[i].velocity = (a.velocity.0 + d * nx, a.velocity.1 + d * ny);
                    balls[j].velocity = (b.velocity.0 - d * nx, b.velocity.1 - d * ny);
                }
            }
        }
        panic!("more than 64 contacts inside one step");
    }
}

pub fn max_position_error(a: &[Vec<(f64, f64)>], b: &[Vec<BallState>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(fa, fb)| fa.iter().zip(fb).map(|(p, q)| (p.0 - q.center.0).abs().max((p.1 - q.center.1).abs())))
        .fold(0.0, f64::max)
}
