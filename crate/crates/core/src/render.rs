//! Two visual domains over the same geometry, plus masks and boxes.
//!
//! Geometry is in reference pixels; an image of width `w` samples it at
//! scale `w / context.width`. Output pixel `i` covers reference interval
//! `[i / s, (i + 1) / s)`.

use crate::sim::{BallState, EnvContext};
use serde::{Deserialize, Serialize};

pub type Rgb = [f32; 3];

/// RGB image stored as 8-bit values (`k / 255` in `[0, 1]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [0, 1, 2].map(|c| self.data[i + c] as f32 / 255.0)
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: Rgb) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    /// Mean absolute difference over all channels, in `[0, 1]` units.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let s: u64 = self.data.iter().zip(&other.data).map(|(&a, &b)| a.abs_diff(b) as u64).sum();
        s as f64 / (self.data.len() as f64 * 255.0)
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Image {
        let mut out = Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let sx = if horizontal { self.width - 1 - x } else { x };
                let sy = if vertical { self.height - 1 - y } else { y };
                let (i, j) = ((y * self.width + x) * 3, (sy * self.width + sx) * 3);
                out.data[i..i + 3].copy_from_slice(&self.data[j..j + 3]);
            }
        }
        out
    }
}

/// Two-class environment mask; `true` marks border (including the split bar).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    pub width: usize,
    pub height: usize,
    pub border: Vec<bool>,
}

impl SemanticMask {
    pub fn is_border(&self, x: usize, y: usize) -> bool {
        self.border[y * self.width + x]
    }

    pub fn border_count(&self) -> usize {
        self.border.iter().filter(|&&b| b).count()
    }

    /// One-hot `(table, border)` planes.
    pub fn channels(&self) -> [Vec<f32>; 2] {
        let border: Vec<f32> = self.border.iter().map(|&b| b as u8 as f32).collect();
        let table = border.iter().map(|b| 1.0 - b).collect();
        [table, border]
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> SemanticMask {
        let mut border = vec![false; self.border.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let sx = if horizontal { self.width - 1 - x } else { x };
                let sy = if vertical { self.height - 1 - y } else { y };
                border[y * self.width + x] = self.border[sy * self.width + sx];
            }
        }
        SemanticMask { width: self.width, height: self.height, border }
    }
}

/// Ball bounding box in reference pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn from_center(c: (f64, f64), half: f64) -> Self {
        BBox { x_min: c.0 - half, y_min: c.1 - half, x_max: c.0 + half, y_max: c.1 + half }
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool, width: f64, height: f64) -> BBox {
        let mut b = *self;
        if horizontal {
            (b.x_min, b.x_max) = (width - self.x_max, width - self.x_min);
        }
        if vertical {
            (b.y_min, b.y_max) = (height - self.y_max, height - self.y_min);
        }
        b
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox { x_min: a[0], y_min: a[1], x_max: a[2], y_max: a[3] }
    }
}

pub fn bboxes(balls: &[BallState]) -> Vec<BBox> {
    balls.iter().map(|b| BBox::from_center(b.center, b.radius)).collect()
}

/// Output resolution. The desk default samples the 192x96 reference at 1/4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { width: 48, height: 24 }
    }
}

impl RenderConfig {
    fn scale(&self, ctx: &EnvContext) -> (f64, f64) {
        (self.width as f64 / ctx.width as f64, self.height as f64 / ctx.height as f64)
    }

    /// Reference-space point of sub-sample `(u, v)` of an `n x n` grid in pixel `(x, y)`.
    fn sample_point(&self, ctx: &EnvContext, x: usize, y: usize, u: usize, v: usize, n: usize) -> (f64, f64) {
        let (sx, sy) = self.scale(ctx);
        ((x as f64 + (u as f64 + 0.5) / n as f64) / sx, (y as f64 + (v as f64 + 0.5) / n as f64) / sy)
    }
}

const SUPERSAMPLE: usize = 4;

pub const SIM_TABLE: Rgb = [0.86, 0.86, 0.80];
pub const SIM_BORDER: Rgb = [0.16, 0.16, 0.20];
const SIM_BALLS: [Rgb; 6] = [
    [0.85, 0.15, 0.12],
    [0.15, 0.35, 0.85],
    [0.95, 0.75, 0.10],
    [0.20, 0.70, 0.25],
    [0.60, 0.20, 0.70],
    [0.95, 0.50, 0.10],
];

const CLOTH: Rgb = [0.16, 0.45, 0.30];
const WOOD: Rgb = [0.48, 0.30, 0.16];
const BLEN_BALLS: [Rgb; 6] = [
    [0.75, 0.10, 0.16],
    [0.20, 0.30, 0.70],
    [0.90, 0.85, 0.55],
    [0.10, 0.55, 0.45],
    [0.55, 0.25, 0.55],
    [0.85, 0.40, 0.20],
];

fn mix(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

fn scale_rgb(a: Rgb, k: f32) -> Rgb {
    a.map(|v| v * k)
}

fn inside(ball: &BallState, p: (f64, f64)) -> bool {
    let (dx, dy) = (p.0 - ball.center.0, p.1 - ball.center.1);
    dx * dx + dy * dy <= ball.radius * ball.radius
}

/// Flat rendering: hard-edged environment, anti-aliased solid discs.
pub fn render_frame_sim(balls: &[BallState], ctx: &EnvContext, cfg: &RenderConfig) -> Image {
    let mut img = Image::new(cfg.width, cfg.height);
    let n = SUPERSAMPLE;
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let c = cfg.sample_point(ctx, x, y, 0, 0, 1);
            let bg = if ctx.is_border(c.0, c.1) { SIM_BORDER } else { SIM_TABLE };
            let mut acc = [0f32; 3];
            for v in 0..n {
                for u in 0..n {
                    let p = cfg.sample_point(ctx, x, y, u, v, n);
                    let col = balls.iter().rposition(|b| inside(b, p)).map_or(bg, |k| SIM_BALLS[k % SIM_BALLS.len()]);
                    for ch in 0..3 {
                        acc[ch] += col[ch];
                    }
                }
            }
            img.set(x, y, scale_rgb(acc, 1.0 / (n * n) as f32));
        }
    }
    img
}

fn hash3(seed: u64, x: u64, y: u64) -> u64 {
    let mut z = seed ^ x.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ y.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_noise(seed: u64, x: u64, y: u64) -> f32 {
    (hash3(seed, x, y) >> 40) as f32 / (1u64 << 24) as f32
}

/// Distance from `p` to the nearest non-border point along the axes, capped.
fn depth_into_border(ctx: &EnvContext, p: (f64, f64)) -> f64 {
    let b = &ctx.borders;
    let mut d: f64 = 0.0;
    d = d.max(b.left as f64 - p.0);
    d = d.max(p.0 - (ctx.width - b.right) as f64);
    d = d.max(b.top as f64 - p.1);
    d = d.max(p.1 - (ctx.height - b.bottom) as f64);
    if let Some(s) = ctx.split {
        let (lo, hi) = s.x_range();
        if p.0 >= lo && p.0 < hi {
            d = d.max((p.0 - lo).min(hi - p.0));
        }
    }
    d
}

/// Procedurally shaded stand-in for a physically rendered domain: textured
/// cloth, bevelled wood, shaded balls with drop shadows. Texture is keyed
/// by `seed` so a video re-renders identically.
pub fn render_frame_blenlike(balls: &[BallState], ctx: &EnvContext, cfg: &RenderConfig, seed: u64) -> Image {
    let mut img = Image::new(cfg.width, cfg.height);
    let n = SUPERSAMPLE;
    let light = (-0.45f64, -0.6f64);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let grain = unit_noise(seed, x as u64, y as u64);
            let mut acc = [0f32; 3];
            for v in 0..n {
                for u in 0..n {
                    let p = cfg.sample_point(ctx, x, y, u, v, n);
                    let col = if let Some(k) = balls.iter().rposition(|b| inside(b, p)) {
                        let b = &balls[k];
                        let (dx, dy) = ((p.0 - b.center.0) / b.radius, (p.1 - b.center.1) / b.radius);
                        let r2 = (dx * dx + dy * dy).min(1.0);
                        let nz = (1.0 - r2).sqrt();
                        let lambert = (0.35 + 0.65 * (nz * 0.7 - dx * light.0 - dy * light.1).max(0.0)) as f32;
                        let spec = ((dx - light.0 * 0.5).powi(2) + (dy - light.1 * 0.5).powi(2)).sqrt();
                        let highlight = (1.0 - spec / 0.35).max(0.0) as f32;
                        mix(scale_rgb(BLEN_BALLS[k % BLEN_BALLS.len()], lambert), [1.0, 1.0, 0.95], 0.8 * highlight)
                    } else if ctx.is_border(p.0, p.1) {
                        let d = depth_into_border(ctx, p);
                        let bevel = (1.0 - d / 3.0).max(0.0) as f32;
                        let stripes = 0.9 + 0.1 * ((p.1 * 0.9 + p.0 * 0.15).sin() as f32);
                        mix(scale_rgb(WOOD, stripes * (0.85 + 0.3 * grain)), [0.78, 0.60, 0.38], 0.6 * bevel)
                    } else {
                        let shadowed = balls.iter().any(|b| {
                            let s = (p.0 - b.center.0 - 0.35 * b.radius, p.1 - b.center.1 - 0.5 * b.radius);
                            s.0 * s.0 + s.1 * s.1 <= (1.1 * b.radius).powi(2)
                        });
                        let cloth = scale_rgb(CLOTH, 0.8 + 0.4 * grain);
                        if shadowed {
                            scale_rgb(cloth, 0.55)
                        } else {
                            cloth
                        }
                    };
                    for ch in 0..3 {
                        acc[ch] += col[ch];
                    }
                }
            }
            img.set(x, y, scale_rgb(acc, 1.0 / (n * n) as f32));
        }
    }
    img
}

/// Ball-agnostic mask: border strips and split bar, by pixel-centre test.
pub fn render_gt_mask(ctx: &EnvContext, cfg: &RenderConfig) -> SemanticMask {
    let mut border = Vec::with_capacity(cfg.width * cfg.height);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let c = cfg.sample_point(ctx, x, y, 0, 0, 1);
            border.push(ctx.is_border(c.0, c.1));
        }
    }
    SemanticMask { width: cfg.width, height: cfg.height, border }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sim,
    Blenlike,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Sim => "sim",
            Domain::Blenlike => "blenlike",
        }
    }

    pub fn render(self, balls: &[BallState], ctx: &EnvContext, cfg: &RenderConfig, seed: u64) -> Image {
        match self {
            Domain::Sim => render_frame_sim(balls, ctx, cfg),
            Domain::Blenlike => render_frame_blenlike(balls, ctx, cfg, seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Borders, Split};

    fn ball(x: f64, y: f64) -> BallState {
        BallState { center: (x, y), velocity: (0.0, 0.0), radius: 4.0 }
    }

    #[test]
    fn bbox_is_center_plus_radius() {
        let b = bboxes(&[ball(50.0, 50.0)]);
        assert_eq!(b[0], BBox { x_min: 46.0, y_min: 46.0, x_max: 54.0, y_max: 54.0 });
        assert_eq!(b[0].center(), (50.0, 50.0));
    }

    #[test]
    fn bbox_flip_example() {
        let b = BBox { x_min: 46.0, y_min: 46.0, x_max: 54.0, y_max: 54.0 };
        assert_eq!(b.flipped(true, false, 192.0, 96.0), BBox { x_min: 138.0, y_min: 46.0, x_max: 146.0, y_max: 54.0 });
    }

    #[test]
    fn empty_context_has_no_border() {
        let ctx = EnvContext::plain(192, 96);
        let cfg = RenderConfig { width: 192, height: 96 };
        assert_eq!(render_gt_mask(&ctx, &cfg).border_count(), 0);
        let img = render_frame_sim(&[], &ctx, &cfg);
        assert_eq!(img.get(0, 0), img.get(100, 50));
    }

    #[test]
    fn split_is_five_pixels_wide_at_reference_scale() {
        let ctx = EnvContext { split: Some(Split { center_x: 96, width: 5 }), ..EnvContext::plain(192, 96) };
        let m = render_gt_mask(&ctx, &RenderConfig { width: 192, height: 96 });
        let cols: Vec<usize> = (0..192).filter(|&x| m.is_border(x, 10)).collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols, vec![93, 94, 95, 96, 97]);
        assert!((0..96).all(|y| m.is_border(93, y) && m.is_border(97, y)));
    }

    #[test]
    fn disc_pixels_lie_within_radius() {
        let ctx = EnvContext::plain(192, 96);
        let cfg = RenderConfig { width: 192, height: 96 };
        let img = render_frame_sim(&[ball(50.0, 50.0)], &ctx, &cfg);
        let table = render_frame_sim(&[], &ctx, &cfg);
        for y in 0..96 {
            for x in 0..192 {
                if img.get(x, y) != table.get(x, y) {
                    let (dx, dy) = (x as f64 + 0.5 - 50.0, y as f64 + 0.5 - 50.0);
                    assert!((dx * dx + dy * dy).sqrt() <= 4.0 + std::f64::consts::SQRT_2 / 2.0);
                }
            }
        }
        assert_ne!(img.get(49, 49), table.get(49, 49));
    }

    #[test]
    fn blenlike_is_deterministic_and_differs_from_sim() {
        let ctx = EnvContext {
            borders: Borders { top: 8, bottom: 12, left: 4, right: 15 },
            split: Some(Split { center_x: 100, width: 5 }),
            ..EnvContext::plain(192, 96)
        };
        let cfg = RenderConfig::default();
        let balls = [ball(40.0, 40.0), ball(140.0, 60.0)];
        let a = render_frame_blenlike(&balls, &ctx, &cfg, 9);
        assert_eq!(a, render_frame_blenlike(&balls, &ctx, &cfg, 9));
        assert_ne!(a, render_frame_blenlike(&balls, &ctx, &cfg, 10));
        assert!(a.mean_abs_diff(&render_frame_sim(&balls, &ctx, &cfg)) >= 0.05);
    }

    #[test]
    fn double_flip_is_identity() {
        let ctx = EnvContext { borders: Borders { top: 3, bottom: 9, left: 12, right: 0 }, ..EnvContext::plain(192, 96) };
        let cfg = RenderConfig::default();
        let img = render_frame_blenlike(&[ball(70.0, 30.0)], &ctx, &cfg, 1);
        assert_eq!(img.flipped(true, true).flipped(true, true), img);
        let m = render_gt_mask(&ctx, &cfg);
        assert_eq!(m.flipped(false, true).flipped(false, true), m);
        assert_ne!(m.flipped(true, false), m);
    }

    #[test]
    fn channels_partition() {
        let ctx = EnvContext { borders: Borders { top: 15, bottom: 0, left: 7, right: 2 }, ..EnvContext::plain(192, 96) };
        let [t, b] = render_gt_mask(&ctx, &RenderConfig::default()).channels();
        assert!(t.iter().zip(&b).all(|(x, y)| x + y == 1.0));
    }
}
