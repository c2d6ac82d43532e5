//! Environment segmentation: ball inpainting, k-means pseudo labels, and a
//! small encoder-decoder trained with per-pixel cross-entropy.

use crate::dataset::{Dataset, MaskKind, Split, VideoRecord};
use crate::input::images_to_tensor;
use crate::render::{BBox, Image, SemanticMask};
use bdl_tensor::nn::{Backbone, BackboneSpec, Conv2d, Mode, NormKind, NormSpec};
use bdl_tensor::{checkpoint, cosine_lr, AdamConfig, Graph, ParameterSet, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Frozen pass mark for the mean border IoU of k-means pseudo masks against
/// GT on the desk Sim corpus.
pub const SELF_MASK_IOU_THRESHOLD: f64 = 0.80;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("empty training set")]
    Empty,
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SegError>;

/// Separable Gaussian blur with clamped edges; `sigma` in image pixels.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Vec<[f64; 3]> {
    let (w, h) = (img.width, img.height);
    let px: Vec<[f64; 3]> = (0..w * h).map(|i| [0, 1, 2].map(|c| img.data[i * 3 + c] as f64 / 255.0)).collect();
    if sigma <= 0.0 {
        return px;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (k, d) in (-radius..=radius).enumerate() {
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                    };
                    let s = src[sy * w + sx];
                    for c in 0..3 {
                        acc[c] += kernel[k] * s[c];
                    }
                }
                out[y * w + x] = acc.map(|v| v / norm);
            }
        }
        out
    };
    pass(&pass(&px, true), false)
}

/// Pixel rectangle covered by a reference-space box inflated by `inflate`
/// image pixels. Returns `(x0, y0, x1, y1)` half-open.
fn box_pixels(b: &BBox, scale: (f64, f64), inflate: f64, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let x0 = (b.x_min * scale.0 - inflate).floor().max(0.0) as usize;
    let y0 = (b.y_min * scale.1 - inflate).floor().max(0.0) as usize;
    let x1 = ((b.x_max * scale.0 + inflate).ceil().max(0.0) as usize).min(w);
    let y1 = ((b.y_max * scale.1 + inflate).ceil().max(0.0) as usize).min(h);
    (x0, y0, x1, y1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InpaintConfig {
    pub sigma: f64,
    pub inflate: f64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self { sigma: 3.0, inflate: 2.0 }
    }
}

/// Replace pixels inside each inflated ball box with a blurred copy.
/// `ref_size` is the reference geometry the boxes live in.
pub fn inpaint_balls(img: &Image, boxes: &[BBox], ref_size: (f64, f64), cfg: &InpaintConfig) -> Image {
    if boxes.is_empty() {
        return img.clone();
    }
    let blurred = gaussian_blur(img, cfg.sigma);
    let scale = (img.width as f64 / ref_size.0, img.height as f64 / ref_size.1);
    let mut out = img.clone();
    for b in boxes {
        let (x0, y0, x1, y1) = box_pixels(b, scale, cfg.inflate, img.width, img.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let p = blurred[y * img.width + x];
                out.set(x, y, p.map(|v| v as f32));
            }
        }
    }
    out
}

fn luminance(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

pub const KMEANS_ITERATIONS: usize = 50;

/// Two-cluster k-means on RGB with k-means++ seeding. Returns the per-pixel
/// assignment and the two centroids.
pub fn kmeans2(pixels: &[[f64; 3]], seed: u64) -> Result<(Vec<usize>, [[f64; 3]; 2])> {
    if pixels.is_empty() {
        return Err(SegError::Degenerate("empty image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = pixels[rng.random_range(0..pixels.len())];
    let d2: Vec<f64> = pixels.iter().map(|p| dist2(p, &first)).collect();
    let total: f64 = d2.iter().sum();
    if total == 0.0 {
        return Err(SegError::Degenerate("uniform image has a single colour".into()));
    }
    let mut target = rng.random::<f64>() * total;
    let mut second = *pixels.last().expect("non-empty");
    for (p, &d) in pixels.iter().zip(&d2) {
        if d > 0.0 && target < d {
            second = *p;
            break;
        }
        target -= d;
    }
    let mut centres = [first, second];
    let mut assign = vec![0usize; pixels.len()];
    for it in 0..KMEANS_ITERATIONS {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(pixels) {
            let k = usize::from(dist2(p, &centres[1]) < dist2(p, &centres[0]));
            changed |= *a != k;
            *a = k;
        }
        let mut sum = [[0.0; 3]; 2];
        let mut count = [0usize; 2];
        for (&a, p) in assign.iter().zip(pixels) {
            count[a] += 1;
            for c in 0..3 {
                sum[a][c] += p[c];
            }
        }
        if count.contains(&0) {
            return Err(SegError::Degenerate("k-means produced an empty cluster".into()));
        }
        for k in 0..2 {
            centres[k] = sum[k].map(|s| s / count[k] as f64);
        }
        if !changed && it > 0 {
            break;
        }
    }
    Ok((assign, centres))
}

/// Which label produced a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Gt,
    Kmeans,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Gt => "gt",
            LabelSource::Kmeans => "kmeans",
        }
    }

    /// Where masks predicted from these labels are stored.
    pub fn mask_kind(self) -> MaskKind {
        match self {
            LabelSource::Gt => MaskKind::Sup,
            LabelSource::Kmeans => MaskKind::SelfSup,
        }
    }
}

impl std::str::FromStr for LabelSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gt" => Ok(LabelSource::Gt),
            "kmeans" => Ok(LabelSource::Kmeans),
            _ => Err(format!("unknown label source `{s}` (expected gt or kmeans)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub mask: SemanticMask,
    pub source: LabelSource,
}

/// Cluster an inpainted image into table and border: the smaller cluster is
/// border, and on equal sizes the darker one.
pub fn kmeans_pseudo_mask(img: &Image, seed: u64) -> Result<PseudoLabel> {
    let pixels: Vec<[f64; 3]> = (0..img.width * img.height).map(|i| [0, 1, 2].map(|c| img.data[i * 3 + c] as f64 / 255.0)).collect();
    let (assign, centres) = kmeans2(&pixels, seed)?;
    let n1 = assign.iter().filter(|&&a| a == 1).count();
    let n0 = assign.len() - n1;
    let border_cluster = match n0.cmp(&n1) {
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Equal => usize::from(luminance(&centres[1]) < luminance(&centres[0])),
    };
    let border = assign.iter().map(|&a| a == border_cluster).collect();
    Ok(PseudoLabel { mask: SemanticMask { width: img.width, height: img.height, border }, source: LabelSource::Kmeans })
}

/// Per-class IoU `[table, border]`; an empty union scores 1.
pub fn iou(pred: &SemanticMask, gt: &SemanticMask) -> Result<[f64; 2]> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(SegError::Dims(format!("{}x{} vs {}x{}", pred.width, pred.height, gt.width, gt.height)));
    }
    let score = |class: bool| {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &g) in pred.border.iter().zip(&gt.border) {
            let (p, g) = (p == class, g == class);
            inter += (p && g) as usize;
            union += (p || g) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    Ok([score(false), score(true)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub image_hw: (usize, usize),
    pub stem_channels: usize,
    pub channels: usize,
    pub decoder_channels: usize,
    pub norm: NormSpec,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl SegConfig {
    pub fn desk(image_hw: (usize, usize)) -> Self {
        Self {
            image_hw,
            stem_channels: 8,
            channels: 16,
            decoder_channels: 16,
            norm: NormSpec { groups: 4, ..NormSpec::new(NormKind::Bn) },
            iterations: 300,
            batch: 8,
            lr: 2e-3,
            weight_decay: 1e-6,
            seed: 0,
        }
    }
}

/// Encoder: stem plus three residual blocks (x4 down). Decoder: five
/// convolutions with leaky-relu, upsampling back to the input size.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: SegConfig,
    pub params: ParameterSet<f32>,
    encoder: Backbone,
    decoder: Vec<Conv2d>,
}

const LEAK: f64 = 0.1;

impl SegModel {
    pub fn new(config: SegConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e6_0000);
        let mut params = ParameterSet::new();
        let spec = BackboneSpec {
            in_channels: 3,
            stem_channels: config.stem_channels,
            residual_blocks: 3,
            hourglass_depth: 0,
            out_channels: config.channels,
        };
        let encoder = Backbone::new(&mut params, &mut rng, "enc", spec, config.norm, config.image_hw)?;
        let d = config.decoder_channels;
        let shapes = [(config.channels, d, 3), (d, d, 3), (d, d, 3), (d, d, 3), (d, 2, 1)];
        let decoder = shapes
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, k))| Conv2d::new(&mut params, &mut rng, &format!("dec{i}"), cin, cout, k, 1, true))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { config, params, encoder, decoder })
    }

    /// Logits `(N, 2, H, W)`.
    pub fn forward(&self, g: &mut Graph<f32>, x: Var, mode: Mode) -> Result<Var> {
        let (h, w) = self.config.image_hw;
        let f = self.encoder.forward(g, &self.params, x, mode)?;
        let mut y = self.decoder[0].forward(g, &self.params, f)?;
        y = g.leaky_relu(y, LEAK);
        y = g.upsample_nearest(y, h / 2, w / 2)?;
        y = self.decoder[1].forward(g, &self.params, y)?;
        y = g.leaky_relu(y, LEAK);
        y = g.upsample_nearest(y, h, w)?;
        for conv in &self.decoder[2..4] {
            y = conv.forward(g, &self.params, y)?;
            y = g.leaky_relu(y, LEAK);
        }
        Ok(self.decoder[4].forward(g, &self.params, y)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let hyper = serde_json::to_value(self.config).expect("config serializes");
        Ok(checkpoint::save(path, &self.params, &hyper)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = std::fs::read_to_string(checkpoint::sidecar_path(path))
            .map_err(|e| TensorError::Checkpoint { path: path.into(), msg: e.to_string() })?;
        let v: serde_json::Value = serde_json::from_str(&sidecar)
            .map_err(|e| TensorError::Checkpoint { path: path.into(), msg: e.to_string() })?;
        let config: SegConfig = serde_json::from_value(v["hyperparameters"].clone())
            .map_err(|e| TensorError::Checkpoint { path: path.into(), msg: e.to_string() })?;
        let mut model = Self::new(config)?;
        let loaded = checkpoint::load::<f32>(path)?;
        for (name, p) in loaded.iter() {
            model.params.set_value(name, p.value.clone())?;
        }
        Ok(model)
    }
}

/// One training image with its per-pixel label.
#[derive(Debug, Clone, Copy)]
pub struct SegExample<'a> {
    pub image: &'a Image,
    pub label: &'a SemanticMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegTrainLog {
    pub losses: Vec<(usize, f64)>,
}

fn targets(labels: &[&SemanticMask]) -> Vec<usize> {
    labels.iter().flat_map(|m| m.border.iter().map(|&b| b as usize)).collect()
}

pub fn train_seg(examples: &[SegExample], config: SegConfig) -> Result<(SegModel, SegTrainLog)> {
    if examples.is_empty() {
        return Err(SegError::Empty);
    }
    for e in examples {
        if (e.image.height, e.image.width) != config.image_hw || (e.label.height, e.label.width) != config.image_hw {
            return Err(SegError::Dims(format!("example is not {:?}", config.image_hw)));
        }
    }
    let mut model = SegModel::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig { weight_decay: config.weight_decay, ..AdamConfig::default() };
    let mut log = SegTrainLog { losses: Vec::new() };
    for step in 0..config.iterations {
        let batch: Vec<&SegExample> = (0..config.batch).map(|_| &examples[rng.random_range(0..examples.len())]).collect();
        let mut g = Graph::new();
        let imgs: Vec<&Image> = batch.iter().map(|e| e.image).collect();
        let x = g.constant(images_to_tensor(&imgs));
        let logits = model.forward(&mut g, x, Mode::Train)?;
        let labels: Vec<&SemanticMask> = batch.iter().map(|e| e.label).collect();
        let loss = g.softmax_cross_entropy(logits, &targets(&labels))?;
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(SegError::NonFinite { step });
        }
        let grads = g.backward(loss)?;
        model.params.accumulate(&g, &grads);
        model.params.apply_buffer_updates(&mut g)?;
        model.params.adam_step(cosine_lr(step as u64, config.iterations as u64, config.lr), &adam)?;
        log.losses.push((step, lv));
    }
    Ok((model, log))
}

/// Per-pixel argmax; ties go to table.
pub fn logits_to_mask(logits: &Tensor<f32>, index: usize) -> SemanticMask {
    let s = logits.shape();
    let (h, w) = (s[2], s[3]);
    let base = index * 2 * h * w;
    let d = logits.data();
    let border = (0..h * w).map(|p| d[base + h * w + p] > d[base + p]).collect();
    SemanticMask { width: w, height: h, border }
}

pub fn infer_masks(model: &SegModel, images: &[&Image]) -> Result<Vec<SemanticMask>> {
    for img in images {
        if (img.height, img.width) != model.config.image_hw {
            return Err(SegError::Dims(format!("image {}x{} vs model {:?}", img.width, img.height, model.config.image_hw)));
        }
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(chunk));
        let y = model.forward(&mut g, x, Mode::Eval)?;
        out.extend((0..chunk.len()).map(|i| logits_to_mask(g.value(y), i)));
    }
    Ok(out)
}

pub fn infer_mask(model: &SegModel, image: &Image) -> Result<SemanticMask> {
    Ok(infer_masks(model, &[image])?.remove(0))
}

/// Fraction of pixels classified correctly.
pub fn pixel_accuracy(pred: &SemanticMask, gt: &SemanticMask) -> f64 {
    let same = pred.border.iter().zip(&gt.border).filter(|(a, b)| a == b).count();
    same as f64 / pred.border.len().max(1) as f64
}

/// Frames of each training video used as segmentation examples: four,
/// evenly spaced.
pub fn example_frames(n_frames: usize) -> Vec<usize> {
    let mut f: Vec<usize> = (0..4).map(|i| i * n_frames.saturating_sub(1) / 3).collect();
    f.dedup();
    f
}

/// One k-means pseudo mask per video from its inpainted first frame.
pub fn pseudo_labels(videos: &[VideoRecord], cfg: &InpaintConfig) -> Result<Vec<PseudoLabel>> {
    videos
        .par_iter()
        .map(|v| {
            let ctx = v.context();
            let img = inpaint_balls(&v.frames[0], &v.bboxes[0], (ctx.width as f64, ctx.height as f64), cfg);
            kmeans_pseudo_mask(&img, v.trajectory.seed)
        })
        .collect()
}

/// Outcome of segmenting one dataset.
#[derive(Debug, Clone)]
pub struct Segmented {
    pub model: SegModel,
    pub log: SegTrainLog,
    /// One mask per video, inferred from its first frame.
    pub masks: Vec<(Split, usize, SemanticMask)>,
}

/// Train a segmenter on the train videos of `dataset` with labels from
/// `source`.
pub fn train_segmenter(dataset: &Dataset, source: LabelSource, config: SegConfig) -> Result<(SegModel, SegTrainLog)> {
    let train = dataset.split(Split::Train);
    let labels: Vec<SemanticMask> = match source {
        LabelSource::Gt => train.iter().map(|v| v.gt_mask.clone()).collect(),
        LabelSource::Kmeans => pseudo_labels(train, &InpaintConfig::default())?.into_iter().map(|p| p.mask).collect(),
    };
    let examples: Vec<SegExample> = train
        .iter()
        .zip(&labels)
        .flat_map(|(v, label)| example_frames(v.frames.len()).into_iter().map(move |f| SegExample { image: &v.frames[f], label }))
        .collect();
    train_seg(&examples, config)
}

/// A mask for every train and test video, inferred from its first frame.
pub fn infer_dataset_masks(model: &SegModel, dataset: &Dataset) -> Result<Vec<(Split, usize, SemanticMask)>> {
    let mut masks = Vec::new();
    for split in [Split::Train, Split::Test] {
        let firsts: Vec<&Image> = dataset.split(split).iter().map(|v| &v.frames[0]).collect();
        masks.extend(infer_masks(model, &firsts)?.into_iter().enumerate().map(|(i, m)| (split, i, m)));
    }
    Ok(masks)
}

pub fn segment_dataset(dataset: &Dataset, source: LabelSource, config: SegConfig) -> Result<Segmented> {
    let (model, log) = train_segmenter(dataset, source, config)?;
    let masks = infer_dataset_masks(&model, dataset)?;
    Ok(Segmented { model, log, masks })
}
