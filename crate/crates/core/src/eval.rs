//! P1/P2 metric, the experiment matrix, and report emission.

use crate::dataset::{
    sample_at, window_starts, Dataset, DatasetError, DatasetId, GenConfig, MaskKind, Split, VideoRecord, TEST_HORIZON,
    TRAIN_HORIZON,
};
use crate::dynamics::{train_dyn, DynConfig, DynError, DynModel, InputMode, TrainLog};
use crate::render::{BBox, RenderConfig};
use crate::seg::{SegConfig, SegError};
use crate::sim::ContextKind;
use bdl_tensor::nn::{NormKind, NormSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;
use thiserror::Error;

pub const METRIC_SCALE: f64 = 1000.0;
/// Windows predicted per forward pass during evaluation.
pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric needs {expected} prediction steps, got {got}")]
    Horizon { expected: usize, got: usize },
    #[error("prediction and ground truth disagree: {0}")]
    Shape(String),
    #[error("invalid matrix config: {0}")]
    Config(String),
    #[error("{dataset} has no {kind} masks on its {split:?} split")]
    MissingMasks { dataset: DatasetId, kind: InputKind, split: Split },
    #[error("refusing to emit an empty report")]
    EmptyReport,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Csv { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Dyn(#[from] DynError),
    #[error(transparent)]
    Seg(#[from] SegError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

/// `(P1, P2)` for one window: squared distance between normalized box
/// centres, averaged over balls and steps of each period, times 1000.
pub fn metric_p1_p2(pred: &[Vec<BBox>], gt: &[Vec<BBox>], ref_size: (f64, f64)) -> Result<(f64, f64)> {
    if pred.len() != TEST_HORIZON || gt.len() != TEST_HORIZON {
        return Err(EvalError::Horizon { expected: TEST_HORIZON, got: if pred.len() != TEST_HORIZON { pred.len() } else { gt.len() } });
    }
    let (w, h) = ref_size;
    let mut periods = [0.0; 2];
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() || p.is_empty() {
            return Err(EvalError::Shape(format!("step {t}: {} predicted vs {} true balls", p.len(), g.len())));
        }
        let step: f64 = p
            .iter()
            .zip(g)
            .map(|(a, b)| {
                let (ac, bc) = (a.center(), b.center());
                ((ac.0 - bc.0) / w).powi(2) + ((ac.1 - bc.1) / h).powi(2)
            })
            .sum::<f64>()
            / p.len() as f64;
        periods[usize::from(t >= TRAIN_HORIZON)] += step;
    }
    Ok((periods[0] / TRAIN_HORIZON as f64 * METRIC_SCALE, periods[1] / (TEST_HORIZON - TRAIN_HORIZON) as f64 * METRIC_SCALE))
}

/// What the dynamics model sees of the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Rgb,
    GtMask,
    SupMask,
    SelfMask,
}

impl InputKind {
    pub const ALL: [InputKind; 4] = [InputKind::Rgb, InputKind::GtMask, InputKind::SupMask, InputKind::SelfMask];

    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::Rgb => "rgb",
            InputKind::GtMask => "gt_mask",
            InputKind::SupMask => "sup_mask",
            InputKind::SelfMask => "self_mask",
        }
    }

    pub fn mode(self) -> InputMode {
        match self {
            InputKind::Rgb => InputMode::Rgb,
            _ => InputMode::Mask,
        }
    }

    /// Inverse of `(mode, mask_kind)`.
    pub fn from_config(mode: InputMode, mask: MaskKind) -> Self {
        match (mode, mask) {
            (InputMode::Rgb, _) => InputKind::Rgb,
            (InputMode::Mask, MaskKind::Gt) => InputKind::GtMask,
            (InputMode::Mask, MaskKind::Sup) => InputKind::SupMask,
            (InputMode::Mask, MaskKind::SelfSup) => InputKind::SelfMask,
        }
    }

    /// Mask file the input reads; RGB input carries the GT mask unused.
    pub fn mask_kind(self) -> MaskKind {
        match self {
            InputKind::Rgb | InputKind::GtMask => MaskKind::Gt,
            InputKind::SupMask => MaskKind::Sup,
            InputKind::SelfMask => MaskKind::SelfSup,
        }
    }
}

impl fmt::Display for InputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        InputKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown input `{s}` (expected rgb, gt_mask, sup_mask or self_mask)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Aligned,
    Cross,
}

impl Relation {
    pub fn of(source: DatasetId, target: DatasetId) -> Self {
        if source == target {
            Relation::Aligned
        } else {
            Relation::Cross
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Aligned => "aligned",
            Relation::Cross => "cross",
        }
    }
}

impl FromStr for Relation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "aligned" => Ok(Relation::Aligned),
            "cross" => Ok(Relation::Cross),
            _ => Err(format!("unknown relation `{s}`")),
        }
    }
}

/// Which factors differ between source and target.
pub fn shift_label(source: DatasetId, target: DatasetId) -> &'static str {
    match (source.domain == target.domain, source.context == target.context) {
        (true, true) => "aligned",
        (false, true) => "cross-domain",
        (true, false) => "cross-context",
        (false, false) => "cross-both",
    }
}

/// Switches dataset size, widths, batch and iterations together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleProfile {
    Desk,
    Paper,
}

impl ScaleProfile {
    pub fn gen_config(self, context: ContextKind) -> GenConfig {
        match self {
            ScaleProfile::Desk => GenConfig::desk(context),
            ScaleProfile::Paper => GenConfig {
                n_train: 1000,
                n_test: 1000,
                render: RenderConfig { width: 192, height: 96 },
                ..GenConfig::desk(context)
            },
        }
    }

    pub fn dyn_config(self, input: InputKind, norm: NormKind, seed: u64) -> DynConfig {
        let desk = DynConfig { mask_kind: input.mask_kind(), ..DynConfig::desk(input.mode(), norm, seed) };
        match self {
            ScaleProfile::Desk => desk,
            ScaleProfile::Paper => DynConfig {
                norm: NormSpec::new(norm),
                image_hw: (96, 192),
                stem_channels: 64,
                channels: 256,
                hourglass_depth: 2,
                batch: 40,
                iterations: 50_000,
                log_every: 500,
                ..desk
            },
        }
    }

    pub fn seg_config(self, seed: u64) -> SegConfig {
        match self {
            ScaleProfile::Desk => SegConfig { seed, ..SegConfig::desk((24, 48)) },
            ScaleProfile::Paper => SegConfig {
                stem_channels: 16,
                channels: 32,
                decoder_channels: 32,
                iterations: 3000,
                seed,
                ..SegConfig::desk((96, 192))
            },
        }
    }
}

impl FromStr for ScaleProfile {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(ScaleProfile::Desk),
            "paper" => Ok(ScaleProfile::Paper),
            _ => Err(format!("unknown profile `{s}` (expected desk or paper)")),
        }
    }
}

/// Everything that identifies a trained model apart from its source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub input: InputKind,
    pub norm: NormKind,
    pub lambda_align: f64,
    pub roi_k: usize,
    pub seed: u64,
}

impl CellSpec {
    pub fn new(input: InputKind, norm: NormKind, seed: u64) -> Self {
        Self { input, norm, lambda_align: 0.0, roi_k: 3, seed }
    }

    pub fn dyn_config(&self, profile: ScaleProfile, iterations: Option<usize>) -> DynConfig {
        let mut c = profile.dyn_config(self.input, self.norm, self.seed);
        c.lambda_align = self.lambda_align;
        c.roi_k = self.roi_k;
        if let Some(it) = iterations {
            c.iterations = it;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub source: DatasetId,
    pub target: DatasetId,
    pub relation: Relation,
    pub input: InputKind,
    pub norm: NormKind,
    pub lambda_align: f64,
    pub roi_k: usize,
    pub seed: u64,
    pub p1: f64,
    pub p2: f64,
    /// Set when the cell failed; the metrics are then NaN.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MetricRow {
    pub fn new(source: DatasetId, target: DatasetId, spec: &CellSpec, p1: f64, p2: f64) -> Self {
        Self {
            source,
            target,
            relation: Relation::of(source, target),
            input: spec.input,
            norm: spec.norm,
            lambda_align: spec.lambda_align,
            roi_k: spec.roi_k,
            seed: spec.seed,
            p1,
            p2,
            error: None,
        }
    }

    pub fn failed(source: DatasetId, target: DatasetId, spec: &CellSpec, error: String) -> Self {
        Self { error: Some(error), ..Self::new(source, target, spec, f64::NAN, f64::NAN) }
    }

    pub fn spec(&self) -> CellSpec {
        CellSpec { input: self.input, norm: self.norm, lambda_align: self.lambda_align, roi_k: self.roi_k, seed: self.seed }
    }
}

pub fn check_masks(dataset: &Dataset, input: InputKind, split: Split) -> Result<()> {
    if dataset.split(split).iter().any(|v| v.mask(input.mask_kind()).is_none()) {
        return Err(EvalError::MissingMasks { dataset: dataset.id, kind: input, split });
    }
    Ok(())
}

/// Mean `(P1, P2)` over every test window of `videos`.
pub fn evaluate(model: &DynModel<f32>, videos: &[VideoRecord], input: InputKind) -> Result<(f64, f64)> {
    let windows: Vec<(usize, usize)> =
        videos.iter().enumerate().flat_map(|(v, r)| window_starts(r.frames.len(), Split::Test).map(move |s| (v, s))).collect();
    if windows.is_empty() {
        return Err(EvalError::Config("no test windows to evaluate".into()));
    }
    let mut sums = (0.0, 0.0);
    for chunk in windows.chunks(EVAL_BATCH) {
        let samples = chunk
            .iter()
            .map(|&(v, s)| sample_at(&videos[v], s, TEST_HORIZON, input.mask_kind()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| EvalError::Shape(format!("a test video lacks {input} masks")))?;
        let preds = model.predict(&samples, TEST_HORIZON)?;
        for (pred, sample) in preds.iter().zip(&samples) {
            let (p1, p2) = metric_p1_p2(pred, &sample.target_boxes, (sample.width, sample.height))?;
            sums.0 += p1;
            sums.1 += p2;
        }
    }
    let n = windows.len() as f64;
    Ok((sums.0 / n, sums.1 / n))
}

/// Train on the source train split and evaluate on the target test split.
pub fn run_cell(
    source: &Dataset,
    target: &Dataset,
    spec: &CellSpec,
    profile: ScaleProfile,
    iterations: Option<usize>,
) -> Result<(MetricRow, DynModel<f32>, TrainLog)> {
    check_masks(source, spec.input, Split::Train)?;
    check_masks(target, spec.input, Split::Test)?;
    let (model, log) = train_dyn::<f32>(source.split(Split::Train), spec.dyn_config(profile, iterations))?;
    let (p1, p2) = evaluate(&model, target.split(Split::Test), spec.input)?;
    Ok((MetricRow::new(source.id, target.id, spec, p1, p2), model, log))
}

/// Experiment matrix: every source x target x input x norm x lambda x RoI
/// size x seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub profile: ScaleProfile,
    pub sources: Vec<DatasetId>,
    pub targets: Vec<DatasetId>,
    pub inputs: Vec<InputKind>,
    pub norms: Vec<NormKind>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_roi_ks")]
    pub roi_ks: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Overrides the profile's training iterations.
    #[serde(default)]
    pub iterations: Option<usize>,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0]
}

fn default_roi_ks() -> Vec<usize> {
    vec![3]
}

impl MatrixConfig {
    pub fn new(sources: Vec<DatasetId>, targets: Vec<DatasetId>, inputs: Vec<InputKind>, norms: Vec<NormKind>) -> Self {
        Self {
            profile: ScaleProfile::Desk,
            sources,
            targets,
            inputs,
            norms,
            lambdas: default_lambdas(),
            roi_ks: default_roi_ks(),
            seeds: vec![0, 1, 2],
            iterations: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EvalError::Config(m.into()));
        if self.sources.is_empty() || self.targets.is_empty() || self.inputs.is_empty() || self.norms.is_empty() {
            return bad("sources, targets, inputs and norms must be non-empty");
        }
        if self.lambdas.is_empty() || self.roi_ks.is_empty() || self.seeds.is_empty() {
            return bad("lambdas, roi_ks and seeds must be non-empty");
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("lambda_align values must be finite and non-negative");
        }
        if self.roi_ks.iter().any(|&k| k == 0 || k % 2 == 0) {
            return bad("RoI sizes must be odd and positive");
        }
        if self.iterations == Some(0) {
            return bad("iterations must be positive");
        }
        Ok(())
    }

    /// Models in run order, each evaluated on every target.
    pub fn models(&self) -> Vec<(DatasetId, CellSpec)> {
        let mut out = Vec::new();
        for &source in &self.sources {
            for &input in &self.inputs {
                for &norm in &self.norms {
                    for &lambda_align in &self.lambdas {
                        for &roi_k in &self.roi_ks {
                            for &seed in &self.seeds {
                                out.push((source, CellSpec { input, norm, lambda_align, roi_k, seed }));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn n_rows(&self) -> usize {
        self.models().len() * self.targets.len()
    }

    pub fn datasets(&self) -> Vec<DatasetId> {
        let mut ids: Vec<DatasetId> = self.sources.iter().chain(&self.targets).copied().collect();
        ids.sort_by_key(|d| d.to_string());
        ids.dedup();
        ids
    }
}

/// Cache key of a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelKey {
    pub source: DatasetId,
    pub input: InputKind,
    pub norm: NormKind,
    pub lambda_bits: u64,
    pub roi_k: usize,
    pub seed: u64,
}

impl ModelKey {
    pub fn new(source: DatasetId, spec: &CellSpec) -> Self {
        Self { source, input: spec.input, norm: spec.norm, lambda_bits: spec.lambda_align.to_bits(), roi_k: spec.roi_k, seed: spec.seed }
    }
}

impl fmt::Display for ModelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lambda = f64::from_bits(self.lambda_bits);
        write!(f, "{}_{}_{}_l{lambda}_k{}_s{}", self.source, self.input, self.norm, self.roi_k, self.seed)
    }
}

/// 64-bit FNV-1a, stable across toolchains.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub trained: usize,
    /// Checkpoints reused from the cache directory.
    pub loaded: usize,
    /// Evaluations served by a model already held in memory.
    pub hits: usize,
}

/// Trained models keyed by [`ModelKey`], optionally persisted as
/// checkpoints whose names include a fingerprint of config and data.
#[derive(Debug, Default)]
pub struct ModelCache {
    dir: Option<PathBuf>,
    models: Mutex<HashMap<ModelKey, Arc<DynModel<f32>>>>,
    stats: Mutex<CacheStats>,
}

impl ModelCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, ..Self::default() }
    }

    pub fn stats(&self) -> CacheStats {
        *self.stats.lock().expect("cache lock")
    }

    fn checkpoint_path(&self, key: &ModelKey, config: &DynConfig, source: &Dataset) -> Option<PathBuf> {
        let dir = self.dir.as_ref()?;
        let identity = serde_json::to_string(&(config, &source.meta)).expect("config serializes");
        Some(dir.join(format!("{key}-{:016x}.ckpt", fingerprint(identity.as_bytes()))))
    }

    /// The model for `key`, trained on `source` on first use.
    pub fn get_or_train(&self, key: ModelKey, config: DynConfig, source: &Dataset) -> Result<Arc<DynModel<f32>>> {
        if let Some(m) = self.models.lock().expect("cache lock").get(&key) {
            self.stats.lock().expect("cache lock").hits += 1;
            return Ok(m.clone());
        }
        let path = self.checkpoint_path(&key, &config, source);
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            if let Ok(m) = DynModel::<f32>::load(p) {
                if m.config == config {
                    let m = Arc::new(m);
                    self.models.lock().expect("cache lock").insert(key, m.clone());
                    self.stats.lock().expect("cache lock").loaded += 1;
                    return Ok(m);
                }
            }
        }
        let (model, log) = train_dyn::<f32>(source.split(Split::Train), config)?;
        if let Some(p) = &path {
            fs::create_dir_all(p.parent().expect("checkpoint has a parent")).map_err(io_err(p))?;
            model.save(p)?;
            log.write_jsonl(&p.with_extension("log.jsonl"))?;
        }
        let m = Arc::new(model);
        self.models.lock().expect("cache lock").insert(key, m.clone());
        self.stats.lock().expect("cache lock").trained += 1;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: MatrixConfig,
    pub rows: Vec<MetricRow>,
    pub cache: CacheStats,
    pub wall_seconds: f64,
}

/// Mean and spread of one cell over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub source: DatasetId,
    pub target: DatasetId,
    pub relation: Relation,
    pub input: InputKind,
    pub norm: NormKind,
    pub lambda_align: f64,
    pub roi_k: usize,
    pub seeds: usize,
    pub p1_mean: f64,
    /// Sample standard deviation; `None` with fewer than two seeds.
    pub p1_std: Option<f64>,
    pub p2_mean: f64,
    pub p2_std: Option<f64>,
}

impl Aggregate {
    pub fn p1_text(&self) -> String {
        plus_minus(self.p1_mean, self.p1_std)
    }

    pub fn p2_text(&self) -> String {
        plus_minus(self.p2_mean, self.p2_std)
    }
}

/// `1.131 ± 0.011`, or `1.131 ± n/a` without a spread.
pub fn plus_minus(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{mean:.3} ± {s:.3}"),
        None => format!("{mean:.3} ± n/a"),
    }
}

/// `(mean, sample std)`; the std needs at least two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

impl ExperimentReport {
    pub fn errors(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }

    /// Aggregates over seeds of the successful rows, in first-seen order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        type Key = (String, String, InputKind, NormKind, u64, usize);
        let mut order: Vec<Key> = Vec::new();
        let mut groups: HashMap<Key, Vec<&MetricRow>> = HashMap::new();
        for r in self.rows.iter().filter(|r| r.error.is_none()) {
            let key = (r.source.to_string(), r.target.to_string(), r.input, r.norm, r.lambda_align.to_bits(), r.roi_k);
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .iter()
            .map(|k| {
                let rows = &groups[k];
                let first = rows[0];
                let (p1_mean, p1_std) = mean_std(&rows.iter().map(|r| r.p1).collect::<Vec<_>>());
                let (p2_mean, p2_std) = mean_std(&rows.iter().map(|r| r.p2).collect::<Vec<_>>());
                Aggregate {
                    source: first.source,
                    target: first.target,
                    relation: first.relation,
                    input: first.input,
                    norm: first.norm,
                    lambda_align: first.lambda_align,
                    roi_k: first.roi_k,
                    seeds: rows.len(),
                    p1_mean,
                    p1_std,
                    p2_mean,
                    p2_std,
                }
            })
            .collect()
    }

    /// Successful rows matching a predicate.
    pub fn select(&self, pred: impl Fn(&MetricRow) -> bool) -> Vec<&MetricRow> {
        self.rows.iter().filter(|r| r.error.is_none() && pred(r)).collect()
    }
}

/// Options that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for model checkpoints reused across runs.
    pub cache_dir: Option<PathBuf>,
    /// Worker threads; 0 means one.
    pub jobs: usize,
}

/// Run every cell of `config` on datasets under `root`. Failed cells become
/// error rows instead of aborting the matrix.
pub fn run_matrix(root: &Path, config: &MatrixConfig, options: &RunOptions) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let datasets: BTreeMap<String, std::result::Result<Dataset, String>> =
        config.datasets().into_iter().map(|id| (id.to_string(), Dataset::load(root, id).map_err(|e| e.to_string()))).collect();
    let cache = ModelCache::new(options.cache_dir.clone());
    let models = config.models();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs.max(1))
        .build()
        .map_err(|e| EvalError::Config(format!("thread pool: {e}")))?;
    let per_model: Vec<Vec<MetricRow>> = pool.install(|| {
        models.par_iter().map(|(source, spec)| model_rows(&datasets, &cache, config, *source, spec)).collect()
    });
    Ok(ExperimentReport {
        config: config.clone(),
        rows: per_model.into_iter().flatten().collect(),
        cache: cache.stats(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn model_rows(
    datasets: &BTreeMap<String, std::result::Result<Dataset, String>>,
    cache: &ModelCache,
    config: &MatrixConfig,
    source: DatasetId,
    spec: &CellSpec,
) -> Vec<MetricRow> {
    let get = |id: DatasetId| datasets[&id.to_string()].as_ref().map_err(|e| e.clone());
    let key = ModelKey::new(source, spec);
    let mut model = None;
    config
        .targets
        .iter()
        .map(|&target| {
            let row = (|| -> std::result::Result<MetricRow, String> {
                let (src, tgt) = (get(source)?, get(target)?);
                check_masks(tgt, spec.input, Split::Test).map_err(|e| e.to_string())?;
                let m = match &model {
                    Some(m) => {
                        cache.stats.lock().expect("cache lock").hits += 1;
                        Arc::clone(m)
                    }
                    None => {
                        check_masks(src, spec.input, Split::Train).map_err(|e| e.to_string())?;
                        let m = cache.get_or_train(key, spec.dyn_config(config.profile, config.iterations), src).map_err(|e| e.to_string())?;
                        model = Some(m.clone());
                        m
                    }
                };
                let (p1, p2) = evaluate(&m, tgt.split(Split::Test), spec.input).map_err(|e| e.to_string())?;
                Ok(MetricRow::new(source, target, spec, p1, p2))
            })();
            row.unwrap_or_else(|e| MetricRow::failed(source, target, spec, e))
        })
        .collect()
}

pub const CSV_HEADER: &str = "source,target,relation,input,norm,lambda_align,roi_k,seed,p1,p2";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            _ => Err(format!("unknown report format `{s}` (expected csv, json or svg)")),
        }
    }
}

pub fn csv_line(r: &MetricRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.source,
        r.target,
        r.relation.as_str(),
        r.input,
        r.norm,
        r.lambda_align,
        r.roi_k,
        r.seed,
        r.p1,
        r.p2
    )
}

pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&csv_line(r));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Parse a CSV written by [`write_csv`]. Error rows come back with NaN
/// metrics and no message.
pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, msg: String| EvalError::Csv { path: path.to_path_buf(), line: line + 1, msg };
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(bad(0, format!("expected header `{CSV_HEADER}`"))),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 10 {
                return Err(bad(i, format!("{} fields, expected 10", f.len())));
            }
            let e = |m: String| bad(i, m);
            let num = |s: &str| s.parse::<f64>().map_err(|err| bad(i, format!("`{s}`: {err}")));
            let int = |s: &str| s.parse::<u64>().map_err(|err| bad(i, format!("`{s}`: {err}")));
            let row = MetricRow {
                source: f[0].parse().map_err(e)?,
                target: f[1].parse().map_err(e)?,
                relation: f[2].parse().map_err(e)?,
                input: f[3].parse().map_err(e)?,
                norm: f[4].parse().map_err(e)?,
                lambda_align: num(f[5])?,
                roi_k: int(f[6])? as usize,
                seed: int(f[7])?,
                p1: num(f[8])?,
                p2: num(f[9])?,
                error: None,
            };
            if row.relation != Relation::of(row.source, row.target) {
                return Err(bad(i, "relation does not match the source/target pair".into()));
            }
            Ok(row)
        })
        .collect()
}

#[derive(Serialize)]
struct AggregateJson<'a> {
    #[serde(flatten)]
    agg: &'a Aggregate,
    shift: &'static str,
    p1: String,
    p2: String,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a MatrixConfig,
    rows: usize,
    errors: Vec<&'a MetricRow>,
    cache: CacheStats,
    wall_seconds: f64,
    aggregates: Vec<AggregateJson<'a>>,
}

/// Write the requested report files into `dir` and return their paths.
pub fn emit_report(report: &ExperimentReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let aggregates = report.aggregates();
    let mut written = Vec::new();
    for format in formats {
        match format {
            ReportFormat::Csv => {
                let p = dir.join("metrics.csv");
                write_csv(&p, &report.rows)?;
                written.push(p);
            }
            ReportFormat::Json => {
                let p = dir.join("summary.json");
                let summary = Summary {
                    config: &report.config,
                    rows: report.rows.len(),
                    errors: report.errors().collect(),
                    cache: report.cache,
                    wall_seconds: report.wall_seconds,
                    aggregates: aggregates
                        .iter()
                        .map(|a| AggregateJson { agg: a, shift: shift_label(a.source, a.target), p1: a.p1_text(), p2: a.p2_text() })
                        .collect(),
                };
                let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
                fs::write(&p, text).map_err(io_err(&p))?;
                written.push(p);
            }
            ReportFormat::Svg => {
                let mut panels: Vec<(DatasetId, InputKind)> = Vec::new();
                for a in &aggregates {
                    if !panels.contains(&(a.source, a.input)) {
                        panels.push((a.source, a.input));
                    }
                }
                for (source, input) in panels {
                    let p = dir.join(format!("bars_{source}_{input}.svg"));
                    let cells: Vec<&Aggregate> = aggregates.iter().filter(|a| a.source == source && a.input == input).collect();
                    fs::write(&p, bar_chart(source, input, &cells)).map_err(io_err(&p))?;
                    written.push(p);
                }
            }
        }
    }
    Ok(written)
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// Grouped bars: one group per norm (and lambda / RoI size when swept), one
/// bar per target, P1 and P2 side by side.
fn bar_chart(source: DatasetId, input: InputKind, cells: &[&Aggregate]) -> String {
    let mut groups: Vec<String> = Vec::new();
    let mut targets: Vec<DatasetId> = Vec::new();
    let sweeps = cells.iter().any(|a| a.lambda_align != cells[0].lambda_align || a.roi_k != cells[0].roi_k);
    let group_of = |a: &Aggregate| {
        if sweeps {
            format!("{} λ={} k={}", a.norm, a.lambda_align, a.roi_k)
        } else {
            a.norm.to_string()
        }
    };
    for a in cells {
        let g = group_of(a);
        if !groups.contains(&g) {
            groups.push(g);
        }
        if !targets.contains(&a.target) {
            targets.push(a.target);
        }
    }
    let (bar, gap, plot_h, top, left) = (14.0, 18.0, 180.0, 40.0, 50.0);
    let group_w = targets.len() as f64 * bar + gap;
    let panel_w = groups.len() as f64 * group_w + gap;
    let width = left + 2.0 * panel_w + 40.0;
    let height = top + plot_h + 60.0 + 16.0 * targets.len() as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{left}\" y=\"18\" font-size=\"13\">{source} / {input}: mean over seeds, whiskers 1 std</text>\n"
    );
    for (pi, (name, value)) in [("P1", 0usize), ("P2", 1usize)].into_iter().enumerate() {
        let metric = |a: &Aggregate| if value == 0 { (a.p1_mean, a.p1_std) } else { (a.p2_mean, a.p2_std) };
        let max = cells.iter().map(|a| metric(a).0 + metric(a).1.unwrap_or(0.0)).fold(0.0, f64::max).max(1e-9);
        let x0 = left + pi as f64 * panel_w;
        let base = top + plot_h;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{name} (max {max:.3})</text>\n<line x1=\"{x0:.1}\" y1=\"{base:.1}\" x2=\"{:.1}\" y2=\"{base:.1}\" stroke=\"black\"/>\n",
            x0,
            top - 6.0,
            x0 + panel_w - gap
        ));
        for (gi, g) in groups.iter().enumerate() {
            let gx = x0 + gi as f64 * group_w;
            svg.push_str(&format!("<text x=\"{:.1}\" y=\"{:.1}\">{g}</text>\n", gx, base + 14.0));
            for (ti, t) in targets.iter().enumerate() {
                let Some(a) = cells.iter().find(|a| &group_of(a) == g && a.target == *t) else { continue };
                let (m, s) = metric(a);
                let h = m / max * plot_h;
                let bx = gx + ti as f64 * bar;
                svg.push_str(&format!(
                    "<rect x=\"{bx:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"><title>{t}: {}</title></rect>\n",
                    base - h,
                    bar - 2.0,
                    PALETTE[ti % PALETTE.len()],
                    plus_minus(m, s)
                ));
                if let Some(s) = s {
                    let cx = bx + (bar - 2.0) / 2.0;
                    let (y1, y2) = (base - (m - s).max(0.0) / max * plot_h, base - (m + s) / max * plot_h);
                    svg.push_str(&format!("<line x1=\"{cx:.1}\" y1=\"{y1:.1}\" x2=\"{cx:.1}\" y2=\"{y2:.1}\" stroke=\"black\"/>\n"));
                }
            }
        }
    }
    for (ti, t) in targets.iter().enumerate() {
        let y = top + plot_h + 34.0 + 16.0 * ti as f64;
        svg.push_str(&format!(
            "<rect x=\"{left}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{t} ({})</text>\n",
            y - 9.0,
            PALETTE[ti % PALETTE.len()],
            left + 14.0,
            y,
            shift_label(source, *t)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
