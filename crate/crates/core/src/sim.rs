//! Event-driven 2-D billiards.
//!
//! Geometry lives at the reference resolution (192x96 by default) in
//! continuous pixel units; one time unit is one video frame. Balls are
//! frictionless equal-mass discs with restitution 1. Inside a frame the
//! simulator jumps from one exact time of impact to the next.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REF_WIDTH: u32 = 192;
pub const REF_HEIGHT: u32 = 96;
pub const SPLIT_WIDTH: u32 = 5;
pub const MAX_EVENTS_PER_FRAME: usize = 10_000;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("seed {seed}: could not place {n_balls} balls after {attempts} attempts")]
    Placement { seed: u64, n_balls: usize, attempts: usize },
    #[error("frame {frame}: more than {MAX_EVENTS_PER_FRAME} collision events")]
    EventOverflow { frame: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Borders {
    pub top: u32,
    pub bottom: u32,
    pub left: u32,
    pub right: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub center_x: u32,
    pub width: u32,
}

impl Split {
    pub fn x_range(&self) -> (f64, f64) {
        let half = self.width as f64 / 2.0;
        (self.center_x as f64 - half, self.center_x as f64 + half)
    }
}

/// Static environment of one video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvContext {
    pub width: u32,
    pub height: u32,
    pub borders: Borders,
    pub split: Option<Split>,
}

impl EnvContext {
    pub fn plain(width: u32, height: u32) -> Self {
        Self { width, height, borders: Borders { top: 0, bottom: 0, left: 0, right: 0 }, split: None }
    }

    /// Whether the reference-space point lies on a border strip or the split bar.
    /// Intervals are half-open: a border of width `L` covers `x < L`.
    pub fn is_border(&self, x: f64, y: f64) -> bool {
        let b = &self.borders;
        let (w, h) = (self.width as f64, self.height as f64);
        if x < b.left as f64 || x >= w - b.right as f64 || y < b.top as f64 || y >= h - b.bottom as f64 {
            return true;
        }
        match self.split {
            Some(s) => {
                let (lo, hi) = s.x_range();
                x >= lo && x < hi
            }
            None => false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let b = &self.borders;
        if [b.top, b.bottom, b.left, b.right].iter().any(|&v| v > 15) {
            return Err(SimError::Config(format!("border widths {b:?} outside [0, 15]")));
        }
        if b.left + b.right >= self.width || b.top + b.bottom >= self.height {
            return Err(SimError::Config("empty playable region".into()));
        }
        if let Some(s) = self.split {
            let (lo, hi) = (self.width as f64 / 3.0, self.width as f64 * 2.0 / 3.0);
            if s.width != SPLIT_WIDTH || (s.center_x as f64) < lo || (s.center_x as f64) > hi {
                return Err(SimError::Config(format!("split {s:?} outside the allowed band")));
            }
        }
        Ok(())
    }

    /// The wall faces constraining a ball whose centre has abscissa `x`.
    pub fn faces_for(&self, x: f64) -> Vec<Face> {
        let b = &self.borders;
        let mut faces = vec![
            Face { axis: Axis::X, position: b.left as f64, normal: 1.0 },
            Face { axis: Axis::X, position: (self.width - b.right) as f64, normal: -1.0 },
            Face { axis: Axis::Y, position: b.top as f64, normal: 1.0 },
            Face { axis: Axis::Y, position: (self.height - b.bottom) as f64, normal: -1.0 },
        ];
        if let Some(s) = self.split {
            let (lo, hi) = s.x_range();
            faces.push(if x < s.center_x as f64 {
                Face { axis: Axis::X, position: lo, normal: -1.0 }
            } else {
                Face { axis: Axis::X, position: hi, normal: 1.0 }
            });
        }
        faces
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// Axis-aligned wall face. `normal` is +1 or -1 and points into the region
/// the ball lives in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Face {
    pub axis: Axis,
    pub position: f64,
    pub normal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallState {
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    pub radius: f64,
}

impl BallState {
    fn component(&self, axis: Axis) -> (f64, f64) {
        match axis {
            Axis::X => (self.center.0, self.velocity.0),
            Axis::Y => (self.center.1, self.velocity.1),
        }
    }

    fn advance(&mut self, t: f64) {
        self.center.0 += self.velocity.0 * t;
        self.center.1 += self.velocity.1 * t;
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * (self.velocity.0 * self.velocity.0 + self.velocity.1 * self.velocity.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub context: EnvContext,
    pub balls: Vec<BallState>,
}

impl SceneState {
    pub fn kinetic_energy(&self) -> f64 {
        self.balls.iter().map(BallState::kinetic_energy).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub context: EnvContext,
    pub frames: Vec<Vec<BallState>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    Border,
    Split,
}

impl ContextKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextKind::Border => "border",
            ContextKind::Split => "split",
        }
    }
}

/// Bounds for sampling contexts and balls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub context: ContextKind,
    pub max_border: u32,
    pub split_center_range: (u32, u32),
    pub n_balls: usize,
    pub radius: f64,
}

impl SceneConfig {
    pub fn new(context: ContextKind) -> Self {
        Self {
            width: REF_WIDTH,
            height: REF_HEIGHT,
            context,
            max_border: 15,
            split_center_range: (64, 128),
            n_balls: 3,
            radius: 4.0,
        }
    }

    pub fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvContext {
        let mut w = || rng.random_range(0..=self.max_border);
        let borders = Borders { top: w(), bottom: w(), left: w(), right: w() };
        let split = match self.context {
            ContextKind::Border => None,
            ContextKind::Split => {
                let (lo, hi) = self.split_center_range;
                Some(Split { center_x: rng.random_range(lo..=hi), width: SPLIT_WIDTH })
            }
        };
        EnvContext { width: self.width, height: self.height, borders, split }
    }
}

const SPEEDS: [f64; 5] = [2.0, 3.0, 4.0, 5.0, 6.0];

/// `(cos, sin)` of `i * pi / 6`, exact where the value is rational.
pub fn direction(i: usize) -> (f64, f64) {
    let h = 3f64.sqrt() / 2.0;
    let first_quadrant = [(1.0, 0.0), (h, 0.5), (0.5, h)];
    let (q, k) = (i % 12 / 3, i % 3);
    let (c, s) = first_quadrant[k];
    match q {
        0 => (c, s),
        1 => (-s, c),
        2 => (-c, -s),
        _ => (s, -c),
    }
}

/// Sample a context and a non-overlapping ball layout; exactly one ball moves.
pub fn init_scene(config: &SceneConfig, seed: u64) -> Result<SceneState, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let context = config.sample_context(&mut rng);
    context.validate()?;
    let r = config.radius;
    let b = &context.borders;
    let (x_lo, x_hi) = (b.left as f64 + r, (context.width - b.right) as f64 - r);
    let (y_lo, y_hi) = (b.top as f64 + r, (context.height - b.bottom) as f64 - r);
    let mut balls: Vec<BallState> = Vec::with_capacity(config.n_balls);
    let mut attempts = 0;
    while balls.len() < config.n_balls {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS || x_lo >= x_hi || y_lo >= y_hi {
            return Err(SimError::Placement { seed, n_balls: config.n_balls, attempts: attempts - 1 });
        }
        let c = (rng.random_range(x_lo..x_hi), rng.random_range(y_lo..y_hi));
        let clear_of_split = context.split.is_none_or(|s| {
            let (lo, hi) = s.x_range();
            c.0 <= lo - r || c.0 >= hi + r
        });
        let clear_of_balls = balls.iter().all(|o| {
            let (dx, dy) = (c.0 - o.center.0, c.1 - o.center.1);
            dx * dx + dy * dy >= 4.0 * r * r
        });
        if clear_of_split && clear_of_balls {
            balls.push(BallState { center: c, velocity: (0.0, 0.0), radius: r });
        }
    }
    if !balls.is_empty() {
        let mover = rng.random_range(0..balls.len());
        let speed = SPEEDS[rng.random_range(0..SPEEDS.len())];
        let (dx, dy) = direction(rng.random_range(0..12));
        balls[mover].velocity = (speed * dx, speed * dy);
    }
    Ok(SceneState { context, balls })
}

/// Time until the ball centre reaches `face` inflated by the ball radius.
/// `None` when moving parallel to or away from the face.
pub fn time_of_impact_ball_wall(ball: &BallState, face: &Face) -> Option<f64> {
    let (p, v) = ball.component(face.axis);
    let approach = -v * face.normal;
    if approach <= 0.0 {
        return None;
    }
    let contact = face.position + face.normal * ball.radius;
    let gap = (p - contact) * face.normal;
    Some((gap / approach).max(0.0))
}

/// Earliest time at which the two discs touch. `None` when they never do or
/// are separating.
pub fn time_of_impact_ball_ball(a: &BallState, b: &BallState) -> Option<f64> {
    let (dx, dy) = (b.center.0 - a.center.0, b.center.1 - a.center.1);
    let (dvx, dvy) = (b.velocity.0 - a.velocity.0, b.velocity.1 - a.velocity.1);
    let closing = dx * dvx + dy * dvy;
    if closing >= 0.0 {
        return None;
    }
    let reach = a.radius + b.radius;
    let qa = dvx * dvx + dvy * dvy;
    let qc = dx * dx + dy * dy - reach * reach;
    let disc = closing * closing - qa * qc;
    if disc < 0.0 {
        return None;
    }
    // Smaller root of qa t^2 + 2 closing t + qc, in the cancellation-free form.
    Some((qc / (-closing + disc.sqrt())).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Wall(Face),
    Ball(usize),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    t: f64,
    ball: usize,
    kind: EventKind,
}

impl Event {
    /// Ordering key: time, lowest ball index, walls before balls, partner index.
    fn key(&self) -> (f64, usize, usize, usize) {
        match self.kind {
            EventKind::Wall(_) => (self.t, self.ball, 0, 0),
            EventKind::Ball(j) => (self.t, self.ball, 1, j),
        }
    }

    fn before(&self, other: &Event) -> bool {
        let (a, b) = (self.key(), other.key());
        a.0 < b.0 || (a.0 == b.0 && (a.1, a.2, a.3) < (b.1, b.2, b.3))
    }
}

fn next_event(context: &EnvContext, balls: &[BallState], horizon: f64) -> Option<Event> {
    let mut best: Option<Event> = None;
    let mut offer = |e: Event| {
        if e.t <= horizon && best.is_none_or(|b| e.before(&b)) {
            best = Some(e);
        }
    };
    for (i, ball) in balls.iter().enumerate() {
        for face in context.faces_for(ball.center.0) {
            if let Some(t) = time_of_impact_ball_wall(ball, &face) {
                offer(Event { t, ball: i, kind: EventKind::Wall(face) });
            }
        }
        for (j, other) in balls.iter().enumerate().skip(i + 1) {
            if let Some(t) = time_of_impact_ball_ball(ball, other) {
                offer(Event { t, ball: i, kind: EventKind::Ball(j) });
            }
        }
    }
    best
}

/// Equal-mass elastic collision: exchange velocity components along the
/// line of centres.
pub fn resolve_ball_ball(a: &mut BallState, b: &mut BallState) {
    let (dx, dy) = (b.center.0 - a.center.0, b.center.1 - a.center.1);
    let d2 = dx * dx + dy * dy;
    if d2 == 0.0 {
        return;
    }
    let (dvx, dvy) = (a.velocity.0 - b.velocity.0, a.velocity.1 - b.velocity.1);
    let k = (dvx * dx + dvy * dy) / d2;
    a.velocity.0 -= k * dx;
    a.velocity.1 -= k * dy;
    b.velocity.0 += k * dx;
    b.velocity.1 += k * dy;
}

fn resolve(balls: &mut [BallState], event: &Event) {
    match event.kind {
        EventKind::Wall(face) => {
            let v = &mut balls[event.ball].velocity;
            match face.axis {
                Axis::X => v.0 = -v.0,
                Axis::Y => v.1 = -v.1,
            }
        }
        EventKind::Ball(j) => {
            let (head, tail) = balls.split_at_mut(j);
            resolve_ball_ball(&mut head[event.ball], &mut tail[0]);
        }
    }
}

/// Statistics of one simulated frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub wall_events: usize,
    pub ball_events: usize,
}

/// Advance one frame, returning event counts alongside the new state.
pub fn step_with_stats(scene: &SceneState, frame: usize) -> Result<(SceneState, StepStats), SimError> {
    let mut balls = scene.balls.clone();
    let mut remaining = 1.0;
    let mut stats = StepStats::default();
    loop {
        match next_event(&scene.context, &balls, remaining) {
            Some(e) => {
                if stats.wall_events + stats.ball_events >= MAX_EVENTS_PER_FRAME {
                    return Err(SimError::EventOverflow { frame });
                }
                for b in balls.iter_mut() {
                    b.advance(e.t);
                }
                remaining -= e.t;
                resolve(&mut balls, &e);
                match e.kind {
                    EventKind::Wall(_) => stats.wall_events += 1,
                    EventKind::Ball(_) => stats.ball_events += 1,
                }
            }
            None => {
                for b in balls.iter_mut() {
                    b.advance(remaining);
                }
                break;
            }
        }
    }
    Ok((SceneState { context: scene.context, balls }, stats))
}

pub fn step(scene: &SceneState) -> Result<SceneState, SimError> {
    step_with_stats(scene, 0).map(|(s, _)| s)
}

/// Roll a scene forward, recording `n_frames` frames including the start.
pub fn rollout_from(scene: SceneState, seed: u64, n_frames: usize) -> Result<Trajectory, SimError> {
    if n_frames == 0 {
        return Err(SimError::Config("n_frames must be at least 1".into()));
    }
    let mut frames = Vec::with_capacity(n_frames);
    let mut state = scene;
    frames.push(state.balls.clone());
    for f in 1..n_frames {
        state = step_with_stats(&state, f).map(|(s, _)| s)?;
        frames.push(state.balls.clone());
    }
    Ok(Trajectory { context: state.context, frames, seed })
}

pub fn rollout(config: &SceneConfig, seed: u64, n_frames: usize) -> Result<Trajectory, SimError> {
    rollout_from(init_scene(config, seed)?, seed, n_frames)
}

/// Largest violation of the non-penetration invariant in one frame
/// (positive means overlap or wall intrusion, in pixels).
pub fn max_penetration(context: &EnvContext, balls: &[BallState]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (i, b) in balls.iter().enumerate() {
        for f in context.faces_for(b.center.0) {
            let (p, _) = b.component(f.axis);
            worst = worst.max(b.radius - (p - f.position) * f.normal);
        }
        for o in &balls[i + 1..] {
            let d = ((b.center.0 - o.center.0).powi(2) + (b.center.1 - o.center.1).powi(2)).sqrt();
            worst = worst.max(b.radius + o.radius - d);
        }
    }
    worst
}
