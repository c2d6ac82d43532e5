//! Interaction-network dynamics predictor.
//!
//! Per-ball state features `b` are RoI-aligned from backbone features at the
//! ball boxes and extended with two constant planes holding the box centre.
//! Each step computes
//!
//! ```text
//! e_i = f_A(f_O(b_i) + sum_{j != i} f_R(b_i, b_j))
//! z_i = f_Z(b_i, e_i)
//! b_i' = f_P(z_i^t, ..., z_i^{t - T_ref + 1})
//! ```
//!
//! and a small head decodes `b_i'` into a bounded centre offset from the
//! previous centre. Rollouts stay in feature space; images are encoded once.

use crate::dataset::{flip_augment, sample_at, window_starts, MaskKind, Split, VideoRecord, VideoSample, T_REF};
use crate::input::{images_to_tensor, masks_to_tensor};
use crate::render::BBox;
use bdl_tensor::nn::{Backbone, BackboneSpec, Conv2d, Linear, Mode, NormKind, NormSpec};
use bdl_tensor::{checkpoint, cosine_lr, AdamConfig, Element, Graph, ParameterSet, Roi, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynError {
    #[error("{0}")]
    Invalid(String),
    #[error("alignment features need mask input")]
    UnsupportedMode,
    #[error("no training windows")]
    Empty,
    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFinite { step: usize, lr: f64, grad_norm: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DynError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Rgb,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynConfig {
    pub input_mode: InputMode,
    pub mask_kind: MaskKind,
    pub norm: NormSpec,
    /// Rendered image size `(h, w)`.
    pub image_hw: (usize, usize),
    /// Reference geometry `(width, height)` boxes are expressed in.
    pub ref_size: (f64, f64),
    pub radius: f64,
    pub stem_channels: usize,
    pub channels: usize,
    pub hourglass_depth: usize,
    pub roi_k: usize,
    pub gamma: f64,
    pub lambda_align: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub iterations: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl DynConfig {
    pub fn desk(input_mode: InputMode, norm: NormKind, seed: u64) -> Self {
        Self {
            input_mode,
            mask_kind: MaskKind::Gt,
            norm: NormSpec { groups: 4, ..NormSpec::new(norm) },
            image_hw: (24, 48),
            ref_size: (192.0, 96.0),
            radius: 4.0,
            stem_channels: 8,
            channels: 16,
            hourglass_depth: 1,
            roi_k: 3,
            gamma: 0.95,
            lambda_align: 0.0,
            lr: 2e-4,
            weight_decay: 1e-6,
            batch: 8,
            iterations: 2000,
            log_every: 50,
            seed,
        }
    }

    /// State feature channels: visual plus two coordinate planes.
    pub fn state_channels(&self) -> usize {
        self.channels + 2
    }

    fn in_channels(&self) -> usize {
        match self.input_mode {
            InputMode::Rgb => 3,
            InputMode::Mask => 2,
        }
    }

    fn feature_scale(&self) -> f64 {
        self.image_hw.1 as f64 / BackboneSpec::DOWNSAMPLE as f64 / self.ref_size.0
    }

    pub fn validate(&self) -> Result<()> {
        let sx = self.image_hw.1 as f64 / self.ref_size.0;
        let sy = self.image_hw.0 as f64 / self.ref_size.1;
        if (sx - sy).abs() > 1e-12 {
            return Err(DynError::Invalid(format!("image {:?} and reference {:?} differ in aspect", self.image_hw, self.ref_size)));
        }
        if self.roi_k == 0 || self.batch == 0 || self.channels == 0 {
            return Err(DynError::Invalid("roi_k, batch and channels must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || self.gamma == 0.0 {
            return Err(DynError::Invalid(format!("discount {} outside (0, 1]", self.gamma)));
        }
        if self.lambda_align < 0.0 {
            return Err(DynError::Invalid("lambda_align must be non-negative".into()));
        }
        if self.lambda_align > 0.0 && self.input_mode == InputMode::Rgb {
            return Err(DynError::UnsupportedMode);
        }
        Ok(())
    }
}

/// Two 3x3 convolutions with a relu between; optional trailing relu.
#[derive(Debug, Clone)]
struct ConvPair {
    a: Conv2d,
    b: Conv2d,
    final_relu: bool,
}

impl ConvPair {
    fn new<T: Element, R: Rng>(p: &mut ParameterSet<T>, rng: &mut R, name: &str, cin: usize, c: usize, final_relu: bool) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(p, rng, &format!("{name}.0"), cin, c, 3, 1, true)?,
            b: Conv2d::new(p, rng, &format!("{name}.1"), c, c, 3, 1, true)?,
            final_relu,
        })
    }

    fn forward<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, x: Var) -> Result<Var> {
        let h = self.a.forward(g, p, x)?;
        let h = g.relu(h);
        let y = self.b.forward(g, p, h)?;
        Ok(if self.final_relu { g.relu(y) } else { y })
    }
}

/// Row layout of a batch: `B` samples of `N` balls, row `b * N + i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub samples: usize,
    pub balls: usize,
    pair_i: Vec<usize>,
    pair_j: Vec<usize>,
}

impl Layout {
    pub fn new(samples: usize, balls: usize) -> Self {
        let (mut pair_i, mut pair_j) = (Vec::new(), Vec::new());
        for s in 0..samples {
            for i in 0..balls {
                for j in (0..balls).filter(|&j| j != i) {
                    pair_i.push(s * balls + i);
                    pair_j.push(s * balls + j);
                }
            }
        }
        Self { samples, balls, pair_i, pair_j }
    }

    pub fn rows(&self) -> usize {
        self.samples * self.balls
    }
}

/// The five sub-networks. `f_R` is a convolution over the channel-concatenated
/// pair; its first layer is stored as separate self and other halves so the
/// per-ball products are computed once and gathered per pair.
#[derive(Debug, Clone)]
pub struct InteractionCore {
    f_o: ConvPair,
    f_r_self: Conv2d,
    f_r_other: Conv2d,
    f_r_out: Conv2d,
    f_a: ConvPair,
    f_z: ConvPair,
    f_p: ConvPair,
    t_ref: usize,
}

pub const F_R_PREFIX: &str = "core.f_r";

impl InteractionCore {
    fn new<T: Element, R: Rng>(p: &mut ParameterSet<T>, rng: &mut R, d: usize, t_ref: usize) -> Result<Self> {
        Ok(Self {
            f_o: ConvPair::new(p, rng, "core.f_o", d, d, true)?,
            f_r_self: Conv2d::new(p, rng, &format!("{F_R_PREFIX}.self"), d, d, 3, 1, true)?,
            f_r_other: Conv2d::new(p, rng, &format!("{F_R_PREFIX}.other"), d, d, 3, 1, false)?,
            f_r_out: Conv2d::new(p, rng, &format!("{F_R_PREFIX}.out"), d, d, 3, 1, true)?,
            f_a: ConvPair::new(p, rng, "core.f_a", d, d, true)?,
            f_z: ConvPair::new(p, rng, "core.f_z", 2 * d, d, true)?,
            f_p: ConvPair::new(p, rng, "core.f_p", t_ref * d, d, false)?,
            t_ref,
        })
    }

    /// Summed pairwise relative dynamics, zero for a single ball.
    fn relative<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, b: Var, layout: &Layout) -> Result<Var> {
        let shape = g.shape(b).to_vec();
        if layout.pair_i.is_empty() {
            return Ok(g.constant(Tensor::zeros(&shape)));
        }
        let own = self.f_r_self.forward(g, p, b)?;
        let other = self.f_r_other.forward(g, p, b)?;
        let own = g.index_select0(own, &layout.pair_i)?;
        let other = g.index_select0(other, &layout.pair_j)?;
        let h = g.add(own, other)?;
        let h = g.relu(h);
        let r = self.f_r_out.forward(g, p, h)?;
        let r = g.relu(r);
        Ok(g.index_add0(r, &layout.pair_i, layout.rows())?)
    }

    /// Mixture feature `z` for every ball row of `b`.
    pub fn mixture<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, b: Var, layout: &Layout) -> Result<Var> {
        let own = self.f_o.forward(g, p, b)?;
        let rel = self.relative(g, p, b, layout)?;
        let sum = g.add(own, rel)?;
        let e = self.f_a.forward(g, p, sum)?;
        let be = g.concat(&[b, e], 1)?;
        self.f_z.forward(g, p, be)
    }

    /// Next state features from the last `T_ref` mixtures, newest first.
    pub fn interaction_step<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, history: &[Var]) -> Result<Var> {
        if history.len() != self.t_ref {
            return Err(DynError::Invalid(format!("history has {} entries, expected {}", history.len(), self.t_ref)));
        }
        let x = g.concat(history, 1)?;
        self.f_p.forward(g, p, x)
    }
}

/// Maximum per-step centre offset, as a fraction of image size.
pub const MAX_OFFSET: f64 = 0.25;

#[derive(Debug, Clone)]
struct Decoder {
    conv: Conv2d,
    fc: Linear,
}

impl Decoder {
    /// `(rows, 2)` normalized centre offsets.
    fn forward<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, b: Var) -> Result<Var> {
        let h = self.conv.forward(g, p, b)?;
        let h = g.relu(h);
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
        let y = self.fc.forward(g, p, flat)?;
        let y = g.tanh(y);
        Ok(g.scale(y, MAX_OFFSET))
    }
}

#[derive(Debug, Clone)]
pub struct DynModel<T> {
    pub config: DynConfig,
    pub params: ParameterSet<T>,
    backbone: Backbone,
    pub core: InteractionCore,
    decoder: Decoder,
}

/// Inputs of one batch, already converted.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub layout: Layout,
    /// RGB: `(B * T_ref, 3, H, W)` sample-major. Mask: `(B, 2, H, W)`.
    pub input: Tensor<T>,
    /// `[sample][t][ball]` reference boxes.
    pub ref_boxes: Vec<Vec<Vec<BBox>>>,
    /// `[sample][t][ball]` future boxes (may be empty at inference).
    pub target_boxes: Vec<Vec<Vec<BBox>>>,
}

impl<T: Element> Batch<T> {
    pub fn from_samples(samples: &[VideoSample], mode: InputMode) -> Result<Self> {
        let first = samples.first().ok_or(DynError::Empty)?;
        let balls = first.n_balls();
        if samples.iter().any(|s| s.n_balls() != balls || s.ref_boxes.len() != T_REF) {
            return Err(DynError::Invalid("samples in a batch need the same ball count and T_ref reference frames".into()));
        }
        let input = match mode {
            InputMode::Rgb => images_to_tensor(&samples.iter().flat_map(|s| s.ref_images.iter()).collect::<Vec<_>>()),
            InputMode::Mask => masks_to_tensor(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>()),
        };
        Ok(Self {
            layout: Layout::new(samples.len(), balls),
            input,
            ref_boxes: samples.iter().map(|s| s.ref_boxes.clone()).collect(),
            target_boxes: samples.iter().map(|s| s.target_boxes.clone()).collect(),
        })
    }
}

/// Graph handles of one rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Per step `(rows, 2)` normalized centres (unclamped).
    pub centres: Vec<Var>,
    /// Per step predicted state features `(rows, D, k, k)`.
    pub features: Vec<Var>,
    /// Encoded feature map, reused for alignment features.
    pub feature_map: Var,
}

impl<T: Element> DynModel<T> {
    pub fn new(config: DynConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd1_0000);
        let mut params = ParameterSet::new();
        let spec = BackboneSpec {
            in_channels: config.in_channels(),
            stem_channels: config.stem_channels,
            residual_blocks: 3,
            hourglass_depth: config.hourglass_depth,
            out_channels: config.channels,
        };
        let backbone = Backbone::new(&mut params, &mut rng, "backbone", spec, config.norm, config.image_hw)?;
        let d = config.state_channels();
        let core = InteractionCore::new(&mut params, &mut rng, d, T_REF)?;
        let k = config.roi_k;
        let decoder = Decoder {
            conv: Conv2d::new(&mut params, &mut rng, "decoder.conv", d, d, 3, 1, true)?,
            fc: Linear::new(&mut params, &mut rng, "decoder.fc", d * k * k, 2, true)?,
        };
        Ok(Self { config, params, backbone, core, decoder })
    }

    fn normalize(&self, c: (f64, f64)) -> (f64, f64) {
        (c.0 / self.config.ref_size.0, c.1 / self.config.ref_size.1)
    }

    /// Backbone features for the batch input.
    pub fn encode(&self, g: &mut Graph<T>, batch: &Batch<T>, mode: Mode) -> Result<Var> {
        let x = g.constant(batch.input.clone());
        Ok(self.backbone.forward(g, &self.params, x, mode)?)
    }

    /// RoI features at `boxes` (one list per sample) plus centre planes.
    /// `map_index(s)` names the feature-map row of sample `s`.
    pub fn extract_state_features(&self, g: &mut Graph<T>, fmap: Var, boxes: &[&[BBox]], map_index: impl Fn(usize) -> usize) -> Result<Var> {
        let (w, h) = self.config.ref_size;
        let tol = 1e-9;
        let mut rois = Vec::new();
        let mut centres = Vec::new();
        for (s, list) in boxes.iter().enumerate() {
            for b in list.iter() {
                if b.x_min < -tol || b.y_min < -tol || b.x_max > w + tol || b.y_max > h + tol {
                    return Err(DynError::Invalid(format!("box {b:?} outside the {w}x{h} image")));
                }
                rois.push(Roi { batch: map_index(s), x0: b.x_min, y0: b.y_min, x1: b.x_max, y1: b.y_max });
                centres.push(self.normalize(b.center()));
            }
        }
        let k = self.config.roi_k;
        let visual = g.roi_align(fmap, &rois, k, self.config.feature_scale(), 2)?;
        let mut planes = Vec::with_capacity(centres.len() * 2 * k * k);
        for (cx, cy) in centres {
            planes.extend(std::iter::repeat_n(T::from_f64_lossy(cx), k * k));
            planes.extend(std::iter::repeat_n(T::from_f64_lossy(cy), k * k));
        }
        let coords = g.constant(Tensor::from_vec(&[rois.len(), 2, k, k], planes)?);
        Ok(g.concat(&[visual, coords], 1)?)
    }

    fn reference_features(&self, g: &mut Graph<T>, fmap: Var, batch: &Batch<T>) -> Result<Vec<Var>> {
        (0..T_REF)
            .map(|t| {
                let boxes: Vec<&[BBox]> = batch.ref_boxes.iter().map(|r| r[t].as_slice()).collect();
                match self.config.input_mode {
                    InputMode::Rgb => self.extract_state_features(g, fmap, &boxes, |s| s * T_REF + t),
                    InputMode::Mask => self.extract_state_features(g, fmap, &boxes, |s| s),
                }
            })
            .collect()
    }

    /// Predict `horizon` steps without looking at target boxes.
    pub fn rollout(&self, g: &mut Graph<T>, batch: &Batch<T>, horizon: usize, mode: Mode) -> Result<Rollout> {
        if horizon < 1 {
            return Err(DynError::Invalid("horizon must be at least 1".into()));
        }
        let fmap = self.encode(g, batch, mode)?;
        let refs = self.reference_features(g, fmap, batch)?;
        // Newest first.
        let mut history: Vec<Var> = Vec::with_capacity(T_REF);
        for &b in &refs {
            let z = self.core.mixture(g, &self.params, b, &batch.layout)?;
            history.insert(0, z);
        }
        let anchor: Vec<T> = batch
            .ref_boxes
            .iter()
            .flat_map(|r| r[T_REF - 1].iter())
            .flat_map(|b| {
                let c = self.normalize(b.center());
                [T::from_f64_lossy(c.0), T::from_f64_lossy(c.1)]
            })
            .collect();
        let mut centre = g.constant(Tensor::from_vec(&[batch.layout.rows(), 2], anchor)?);
        let mut out = Rollout { centres: Vec::with_capacity(horizon), features: Vec::with_capacity(horizon), feature_map: fmap };
        for step in 0..horizon {
            let b = self.core.interaction_step(g, &self.params, &history)?;
            let offset = self.decoder.forward(g, &self.params, b)?;
            centre = g.add(centre, offset)?;
            out.centres.push(centre);
            out.features.push(b);
            if step + 1 < horizon {
                let z = self.core.mixture(g, &self.params, b, &batch.layout)?;
                history.pop();
                history.insert(0, z);
            }
        }
        Ok(out)
    }

    /// Features re-extracted at the ground-truth future boxes on the mask
    /// feature map, one tensor per step.
    pub fn extract_aligned_features(&self, g: &mut Graph<T>, fmap: Var, batch: &Batch<T>, horizon: usize) -> Result<Vec<Var>> {
        if self.config.input_mode != InputMode::Mask {
            return Err(DynError::UnsupportedMode);
        }
        (0..horizon)
            .map(|t| {
                let boxes: Vec<&[BBox]> = batch.target_boxes.iter().map(|r| r[t].as_slice()).collect();
                let f = self.extract_state_features(g, fmap, &boxes, |s| s)?;
                Ok(g.detach(f))
            })
            .collect()
    }

    /// Emitted boxes `[sample][step][ball]`, clamped inside the image.
    pub fn boxes_from(&self, g: &Graph<T>, rollout: &Rollout, layout: &Layout) -> Vec<Vec<Vec<BBox>>> {
        let (w, h) = self.config.ref_size;
        let r = self.config.radius;
        let mut out = vec![Vec::with_capacity(rollout.centres.len()); layout.samples];
        for &c in &rollout.centres {
            let v = g.value(c).data();
            for (s, frames) in out.iter_mut().enumerate() {
                frames.push(
                    (0..layout.balls)
                        .map(|i| {
                            let row = s * layout.balls + i;
                            let cx = (v[row * 2].as_f64() * w).clamp(r, w - r);
                            let cy = (v[row * 2 + 1].as_f64() * h).clamp(r, h - r);
                            BBox::from_center((cx, cy), r)
                        })
                        .collect(),
                );
            }
        }
        out
    }

    /// Predict boxes for samples (eval mode).
    pub fn predict(&self, samples: &[VideoSample], horizon: usize) -> Result<Vec<Vec<Vec<BBox>>>> {
        let batch = Batch::from_samples(samples, self.config.input_mode)?;
        let mut g = Graph::new();
        let r = self.rollout(&mut g, &batch, horizon, Mode::Eval)?;
        Ok(self.boxes_from(&g, &r, &batch.layout))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let hyper = serde_json::to_value(self.config).expect("config serializes");
        Ok(checkpoint::save(path, &self.params, &hyper)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: String| TensorError::Checkpoint { path: path.into(), msg };
        let sidecar = std::fs::read_to_string(checkpoint::sidecar_path(path)).map_err(|e| bad(e.to_string()))?;
        let v: serde_json::Value = serde_json::from_str(&sidecar).map_err(|e| bad(e.to_string()))?;
        let config: DynConfig = serde_json::from_value(v["hyperparameters"].clone()).map_err(|e| bad(e.to_string()))?;
        let mut model = Self::new(config)?;
        let loaded = checkpoint::load::<T>(path)?;
        if loaded.len() != model.params.len() {
            return Err(bad(format!("{} tensors, model has {}", loaded.len(), model.params.len())).into());
        }
        for (name, p) in loaded.iter() {
            model.params.set_value(name, p.value.clone())?;
        }
        Ok(model)
    }
}

/// `w_t = gamma^(t-1) / sum_s gamma^(s-1)` for `t = 1..=horizon`.
pub fn discount_weights(horizon: usize, gamma: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..horizon).map(|t| gamma.powi(t as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Normalized `(rows, 2)` target centres per step.
pub fn target_centres<T: Element>(batch: &Batch<T>, ref_size: (f64, f64), horizon: usize) -> Result<Vec<Tensor<T>>> {
    (0..horizon)
        .map(|t| {
            let mut data = Vec::with_capacity(batch.layout.rows() * 2);
            for s in &batch.target_boxes {
                let frame = s.get(t).ok_or_else(|| DynError::Invalid(format!("target horizon shorter than {horizon}")))?;
                for b in frame {
                    let c = b.center();
                    data.push(T::from_f64_lossy(c.0 / ref_size.0));
                    data.push(T::from_f64_lossy(c.1 / ref_size.1));
                }
            }
            Ok(Tensor::from_vec(&[batch.layout.rows(), 2], data)?)
        })
        .collect()
}

/// Discounted squared centre error (mean over balls) plus
/// `lambda * mse(b, b_hat)` averaged over steps.
pub fn loss<T: Element>(
    g: &mut Graph<T>,
    centres: &[Var],
    targets: &[Tensor<T>],
    features: &[Var],
    aligned: &[Var],
    gamma: f64,
    lambda: f64,
) -> Result<Var> {
    if centres.len() != targets.len() || centres.is_empty() {
        return Err(DynError::Invalid(format!("{} predicted steps vs {} targets", centres.len(), targets.len())));
    }
    let weights = discount_weights(centres.len(), gamma);
    let mut total: Option<Var> = None;
    for ((&c, t), w) in centres.iter().zip(targets).zip(weights) {
        let rows = g.shape(c)[0].max(1);
        let tv = g.constant(t.clone());
        let d = g.sub(c, tv)?;
        let sq = g.mul(d, d)?;
        let s = g.sum_all(sq);
        let term = g.scale(s, w / rows as f64);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let mut total = total.expect("non-empty");
    if lambda > 0.0 {
        if aligned.len() != features.len() || features.len() != centres.len() {
            return Err(DynError::Invalid(format!("{} features vs {} aligned", features.len(), aligned.len())));
        }
        for (&f, &a) in features.iter().zip(aligned) {
            let m = g.mse(f, a)?;
            let term = g.scale(m, lambda / features.len() as f64);
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let io = |source| DynError::Io { path: path.to_path_buf(), source };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for e in &self.entries {
            writeln!(f, "{}", serde_json::to_string(e).expect("log entry serializes")).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// `(video, start)` pairs of every window of `split` length.
pub fn windows(videos: &[VideoRecord], split: Split) -> Vec<(usize, usize)> {
    videos
        .iter()
        .enumerate()
        .flat_map(|(v, r)| window_starts(r.frames.len(), split).map(move |s| (v, s)))
        .collect()
}

/// One optimizer step on `samples`; returns the loss value.
pub fn train_step<T: Element>(model: &mut DynModel<T>, samples: &[VideoSample], lr: f64, adam: &AdamConfig, step: usize) -> Result<f64> {
    let cfg = model.config;
    let batch = Batch::<T>::from_samples(samples, cfg.input_mode)?;
    let horizon = samples[0].horizon();
    let mut g = Graph::new();
    let r = model.rollout(&mut g, &batch, horizon, Mode::Train)?;
    let aligned = if cfg.lambda_align > 0.0 { model.extract_aligned_features(&mut g, r.feature_map, &batch, horizon)? } else { Vec::new() };
    let targets = target_centres(&batch, cfg.ref_size, horizon)?;
    let l = loss(&mut g, &r.centres, &targets, &r.features, &aligned, cfg.gamma, cfg.lambda_align)?;
    let value = g.value(l).item().as_f64();
    let grads = g.backward(l)?;
    model.params.accumulate(&g, &grads);
    if batch.layout.balls < 2 {
        // No pairs, so the relation network never entered the graph.
        for name in model.params.names().to_vec() {
            let p = model.params.get_mut(&name).expect("listed parameter");
            if p.trainable && p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }
    let grad_norm = model.params.grad_norm();
    if !value.is_finite() || !grad_norm.is_finite() {
        return Err(DynError::NonFinite { step, lr, grad_norm });
    }
    model.params.apply_buffer_updates(&mut g)?;
    model.params.adam_step(lr, adam)?;
    Ok(value)
}

/// Train on the windows of `videos` with random horizontal and vertical flips.
pub fn train_dyn<T: Element>(videos: &[VideoRecord], config: DynConfig) -> Result<(DynModel<T>, TrainLog)> {
    let mut model = DynModel::<T>::new(config)?;
    let windows = windows(videos, Split::Train);
    if windows.is_empty() {
        return Err(DynError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig { weight_decay: config.weight_decay, ..AdamConfig::default() };
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 0..config.iterations {
        let mut samples = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let (v, s) = windows[rng.random_range(0..windows.len())];
            let (h, vflip) = (rng.random::<bool>(), rng.random::<bool>());
            let sample = sample_at(&videos[v], s, Split::Train.horizon(), config.mask_kind)
                .ok_or_else(|| DynError::Invalid(format!("video {v} has no {:?} mask", config.mask_kind)))?;
            samples.push(flip_augment(&sample, h, vflip));
        }
        let lr = cosine_lr(step as u64, config.iterations as u64, config.lr);
        let value = train_step(&mut model, &samples, lr, &adam, step)?;
        if step % config.log_every.max(1) == 0 || step + 1 == config.iterations {
            log.entries.push(LogEntry { step, lr, loss: value, wall_seconds: start.elapsed().as_secs_f64() });
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discount_weights_are_normalized_and_decreasing() {
        let w = discount_weights(20, 0.95);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[1] < p[0]));
        assert_eq!(discount_weights(3, 1.0), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn layout_pairs_exclude_self() {
        let l = Layout::new(2, 3);
        assert_eq!(l.pair_i.len(), 12);
        assert!(l.pair_i.iter().zip(&l.pair_j).all(|(i, j)| i != j && i / 3 == j / 3));
        assert!(Layout::new(4, 1).pair_i.is_empty());
    }

    #[test]
    fn rgb_alignment_is_rejected() {
        let cfg = DynConfig { lambda_align: 1.0, ..DynConfig::desk(InputMode::Rgb, NormKind::Bn, 0) };
        assert!(matches!(DynModel::<f32>::new(cfg), Err(DynError::UnsupportedMode)));
    }
}
