use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bdl_core::dataset::{self, Dataset, DatasetId, Split, T_REF, TEST_HORIZON};
use bdl_core::dynamics::{train_dyn, DynModel};
use bdl_core::eval::{
    check_masks, emit_report, evaluate, read_csv, run_matrix, write_csv, CellSpec, ExperimentReport, InputKind, MatrixConfig,
    MetricRow, ReportFormat, RunOptions, ScaleProfile,
};
use bdl_core::seg::{infer_dataset_masks, iou, train_segmenter, LabelSource, SegModel};
use bdl_core::selfcheck::{self, CheckResult};
use bdl_tensor::nn::NormKind;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Bouncing-ball dynamics under domain shift: data generation, segmentation,
/// training, evaluation and reports.
#[derive(Parser, Debug)]
#[command(name = "bdl", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct GlobalFlags {
    /// JSON config file; explicit flags take precedence over its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dataset root [default: $BDL_DATA_ROOT, then ./data]
    #[arg(long, global = true, value_name = "DIR")]
    data_root: Option<PathBuf>,
    /// Worker threads [default: available cores]
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Scale profile: desk or paper [default: desk]
    #[arg(long, global = true, value_name = "NAME")]
    profile: Option<ScaleProfile>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate and render datasets.
    Gen(GenFlags),
    /// Train a border segmenter on GT or k-means labels.
    SegTrain(SegTrainFlags),
    /// Infer and store a mask for every video of a dataset.
    SegInfer(SegInferFlags),
    /// Train one dynamics model.
    DynTrain(DynTrainFlags),
    /// Evaluate a trained dynamics model on target datasets.
    DynEval(DynEvalFlags),
    /// Train and evaluate a whole experiment matrix.
    Matrix(MatrixFlags),
    /// Rebuild summary and charts from a metrics CSV.
    Report(ReportFlags),
    /// Run the physics, gradient, normalization and structure checks.
    Selfcheck(SelfcheckFlags),
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct Common {
    data_root: Option<PathBuf>,
    jobs: Option<usize>,
    profile: Option<ScaleProfile>,
}

impl Common {
    fn resolve(&mut self) -> Result<(), Failure> {
        if self.data_root.is_none() {
            self.data_root = Some(std::env::var_os("BDL_DATA_ROOT").map_or_else(|| PathBuf::from("data"), PathBuf::from));
        }
        let jobs = *self.jobs.get_or_insert_with(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        self.profile.get_or_insert(ScaleProfile::Desk);
        Ok(())
    }

    fn root(&self) -> &Path {
        self.data_root.as_deref().expect("resolved")
    }

    fn jobs(&self) -> usize {
        self.jobs.expect("resolved")
    }

    fn profile(&self) -> ScaleProfile {
        self.profile.expect("resolved")
    }
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GenFlags {
    /// Datasets to generate, comma separated [default: all four]
    #[arg(long, value_delimiter = ',', value_name = "ID")]
    dataset: Option<Vec<DatasetId>>,
    /// Training videos per dataset [default: from profile]
    #[arg(long, value_name = "N")]
    videos: Option<usize>,
    /// Test videos per dataset [default: from profile]
    #[arg(long, value_name = "N")]
    test_videos: Option<usize>,
    /// Frames per video [default: from profile]
    #[arg(long, value_name = "N")]
    frames: Option<usize>,
    /// Base seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SegTrainFlags {
    #[arg(long, value_name = "ID")]
    dataset: Option<DatasetId>,
    /// gt or kmeans [default: kmeans]
    #[arg(long)]
    labels: Option<LabelSource>,
    /// Checkpoint path.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SegInferFlags {
    #[arg(long, value_name = "ID")]
    dataset: Option<DatasetId>,
    /// Segmenter checkpoint.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Labels the segmenter was trained on [default: from its config echo]
    #[arg(long)]
    labels: Option<LabelSource>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DynTrainFlags {
    /// Source dataset.
    #[arg(long, value_name = "ID")]
    dataset: Option<DatasetId>,
    /// rgb, gt_mask, sup_mask or self_mask [default: rgb]
    #[arg(long)]
    input: Option<InputKind>,
    /// bn, in, gn or ln [default: bn]
    #[arg(long)]
    norm: Option<NormKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the feature alignment loss [default: 0]
    #[arg(long, value_name = "W")]
    lambda_align: Option<f64>,
    /// RoI feature size [default: 3]
    #[arg(long, value_name = "K")]
    roi_k: Option<usize>,
    #[arg(long, value_name = "N")]
    iterations: Option<usize>,
    /// Checkpoint path.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DynEvalFlags {
    /// Dynamics checkpoint.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Dataset the model was trained on [default: from its config echo]
    #[arg(long, value_name = "ID")]
    source: Option<DatasetId>,
    /// Target datasets, comma separated.
    #[arg(long, value_delimiter = ',', value_name = "ID")]
    dataset: Option<Vec<DatasetId>>,
    /// Directory for metrics.csv and the config echo.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct MatrixFlags {
    /// [default: simb-border]
    #[arg(long, value_delimiter = ',', value_name = "IDS")]
    sources: Option<Vec<DatasetId>>,
    /// [default: all four datasets]
    #[arg(long, value_delimiter = ',', value_name = "IDS")]
    targets: Option<Vec<DatasetId>>,
    /// [default: rgb]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    inputs: Option<Vec<InputKind>>,
    /// [default: bn,in,gn,ln]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    norms: Option<Vec<NormKind>>,
    /// Alignment loss weights [default: 0]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    lambdas: Option<Vec<f64>>,
    /// RoI sizes [default: 3]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    roi_ks: Option<Vec<usize>>,
    /// [default: 0,1,2]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    seeds: Option<Vec<u64>>,
    /// Training iterations per model [default: from profile]
    #[arg(long, value_name = "N")]
    iterations: Option<usize>,
    /// Report directory [default: results]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Checkpoint cache [default: <out>/models]
    #[arg(long, value_name = "DIR")]
    cache: Option<PathBuf>,
    /// csv, json, svg [default: all]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    formats: Option<Vec<String>>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ReportFlags {
    /// Metrics CSV written by `matrix` or `dyn-eval`.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// [default: directory of the CSV]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// [default: json,svg]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    formats: Option<Vec<String>>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SelfcheckFlags {
    /// Fewer trajectories and samples; skips the gradient checks.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    quick: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<bdl_core::eval::EvalError> for Failure {
    fn from(e: bdl_core::eval::EvalError) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<bdl_core::dynamics::DynError> for Failure {
    fn from(e: bdl_core::dynamics::DynError) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.global.config {
        Some(path) => read_config_file(path)?,
        None => Map::new(),
    };
    let flags = Common { data_root: cli.global.data_root, jobs: cli.global.jobs, profile: cli.global.profile };
    match cli.command {
        Command::Gen(f) => {
            let (common, f) = merge(&file, &flags, &f)?;
            run_gen(common, f)
        }
        Command::SegTrain(f) => {
            let (common, f) = merge(&file, &flags, &f)?;
            run_seg_train(common, f)
        }
        Command::SegInfer(f) => {
            let (common, f) = merge(&file, &flags, &f)?;
            run_seg_infer(common, f)
        }
        Command::DynTrain(f) => {
            let (common, f) = merge(&file, &flags, &f)?;
            run_dyn_train(common, f)
        }
        Command::DynEval(f) => {
            let (common, f) = merge(&file, &flags, &f)?;
            run_dyn_eval(common, f)
        }
        Command::Matrix(f) => {
            let (common, f) = merge(&file, &flags, &f)?;
            run_matrix_cmd(common, f)
        }
        Command::Report(f) => {
            let (common, f) = merge(&file, &flags, &f)?;
            run_report(common, f)
        }
        Command::Selfcheck(f) => {
            let (common, f) = merge(&file, &flags, &f)?;
            run_selfcheck(common, f)
        }
    }
}

fn read_config_file(path: &Path) -> Result<Map<String, Value>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(usage(format!("config {} must be a JSON object", path.display()))),
        Err(e) => Err(usage(format!("config {}: {e}", path.display()))),
    }
}

fn object_of(value: &impl Serialize) -> Map<String, Value> {
    match serde_json::to_value(value).expect("flags serialize") {
        Value::Object(map) => map,
        _ => unreachable!("flag structs serialize to objects"),
    }
}

/// Overlay explicitly given flags on the config file and split the result
/// into common and command settings. Unknown keys are rejected.
fn merge<F>(file: &Map<String, Value>, common: &Common, flags: &F) -> Result<(Common, F), Failure>
where
    F: Serialize + DeserializeOwned + Default,
{
    let mut known = object_of(&Common::default());
    known.extend(object_of(&F::default()));
    known.insert("quick".into(), Value::Null);
    if let Some(key) = file.keys().find(|k| !known.contains_key(*k)) {
        return Err(usage(format!("unknown config key `{key}` for this subcommand")));
    }
    let mut merged = file.clone();
    for (k, v) in object_of(common).into_iter().chain(object_of(flags)) {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    let merged = Value::Object(merged);
    let c: Common = serde_json::from_value(merged.clone()).map_err(|e| usage(format!("config: {e}")))?;
    let f: F = serde_json::from_value(merged).map_err(|e| usage(format!("config: {e}")))?;
    Ok((c, f))
}

/// Write the fully resolved configuration; passing it back with `--config`
/// repeats the run.
fn write_echo(path: &Path, common: &Common, flags: &impl Serialize) -> anyhow::Result<()> {
    let mut map = object_of(common);
    map.extend(object_of(flags));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes");
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn echo_path(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, Failure> {
    value.clone().ok_or_else(|| usage(format!("missing required --{flag}")))
}

fn init_pool(jobs: usize) -> anyhow::Result<()> {
    // A second call in the same process finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    Ok(())
}

fn parse_formats(list: &[String]) -> Result<Vec<ReportFormat>, Failure> {
    if list.is_empty() {
        return Err(usage("at least one report format is required"));
    }
    list.iter().map(|s| s.parse().map_err(usage)).collect()
}

fn read_echo(out: &Path) -> Option<Map<String, Value>> {
    let text = fs::read_to_string(echo_path(out)).ok()?;
    match serde_json::from_str(&text).ok()? {
        Value::Object(map) => Some(map),
        _ => None,
    }
}

fn echo_field<T: DeserializeOwned>(out: &Path, key: &str) -> Option<T> {
    serde_json::from_value(read_echo(out)?.get(key)?.clone()).ok()
}

fn run_gen(mut common: Common, mut f: GenFlags) -> Result<(), Failure> {
    common.resolve()?;
    let defaults = common.profile().gen_config(bdl_core::sim::ContextKind::Border);
    let ids = f.dataset.get_or_insert_with(|| DatasetId::ALL.to_vec()).clone();
    let n_train = *f.videos.get_or_insert(defaults.n_train);
    let n_test = *f.test_videos.get_or_insert(defaults.n_test);
    let n_frames = *f.frames.get_or_insert(defaults.n_frames);
    let seed = *f.seed.get_or_insert(defaults.seed);
    if ids.is_empty() {
        return Err(usage("--dataset needs at least one id"));
    }
    if n_train == 0 || n_test == 0 {
        return Err(usage("--videos and --test-videos must be at least 1"));
    }
    if n_frames < T_REF + TEST_HORIZON {
        return Err(usage(format!("--frames must be at least {} to hold one test window", T_REF + TEST_HORIZON)));
    }
    init_pool(common.jobs())?;
    let root = common.root();
    for id in ids {
        let config = dataset::GenConfig { n_train, n_test, n_frames, seed, ..common.profile().gen_config(id.context) };
        let start = std::time::Instant::now();
        dataset::generate(root, id, &config, common.jobs()).with_context(|| format!("generating {id}"))?;
        write_echo(&id.dir(root).join("gen.config.json"), &common, &f)?;
        println!("{id}: {n_train} train / {n_test} test videos of {n_frames} frames in {} ({:.1} s)", id.dir(root).display(), start.elapsed().as_secs_f64());
    }
    Ok(())
}

fn run_seg_train(mut common: Common, mut f: SegTrainFlags) -> Result<(), Failure> {
    common.resolve()?;
    let id = required(&f.dataset, "dataset")?;
    let out = required(&f.out, "out")?;
    let labels = *f.labels.get_or_insert(LabelSource::Kmeans);
    let seed = *f.seed.get_or_insert(0);
    let mut config = common.profile().seg_config(seed);
    config.iterations = *f.iterations.get_or_insert(config.iterations);
    if config.iterations == 0 {
        return Err(usage("--iterations must be at least 1"));
    }
    init_pool(common.jobs())?;
    let data = Dataset::load(common.root(), id).with_context(|| format!("loading {id}"))?;
    let (model, log) = train_segmenter(&data, labels, config).context("training segmenter")?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    model.save(&out).with_context(|| format!("saving {}", out.display()))?;
    let lines: String = log
        .losses
        .iter()
        .map(|(step, loss)| serde_json::json!({ "step": step, "loss": loss }).to_string() + "\n")
        .collect();
    let log_path = out.with_extension("log.jsonl");
    fs::write(&log_path, lines).with_context(|| format!("writing {}", log_path.display()))?;
    write_echo(&echo_path(&out), &common, &f)?;
    let last = log.losses.last().map_or(f64::NAN, |l| l.1);
    println!("segmenter on {id} ({} labels): final loss {last:.4}, saved to {}", labels.as_str(), out.display());
    Ok(())
}

fn run_seg_infer(mut common: Common, mut f: SegInferFlags) -> Result<(), Failure> {
    common.resolve()?;
    let id = required(&f.dataset, "dataset")?;
    let model_path = required(&f.model, "model")?;
    if f.labels.is_none() {
        f.labels = echo_field(&model_path, "labels");
    }
    let labels = f.labels.ok_or_else(|| usage("--labels is required when the model has no config echo"))?;
    init_pool(common.jobs())?;
    let root = common.root();
    let model = SegModel::load(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let mut data = Dataset::load(root, id).with_context(|| format!("loading {id}"))?;
    let masks = infer_dataset_masks(&model, &data).context("inferring masks")?;
    let mut border_iou = 0.0;
    for (split, i, m) in &masks {
        border_iou += iou(m, &data.split(*split)[*i].gt_mask).context("scoring masks")?[1];
    }
    let kind = labels.mask_kind();
    data.store_masks(root, kind, &masks).context("storing masks")?;
    write_echo(&id.dir(root).join(format!("seg-infer-{}.config.json", labels.as_str())), &common, &f)?;
    println!("{id}: stored {} {} masks, mean border IoU against GT {:.4}", masks.len(), InputKind::from_config(bdl_core::dynamics::InputMode::Mask, kind), border_iou / masks.len() as f64);
    Ok(())
}

fn run_dyn_train(mut common: Common, mut f: DynTrainFlags) -> Result<(), Failure> {
    common.resolve()?;
    let id = required(&f.dataset, "dataset")?;
    let out = required(&f.out, "out")?;
    let spec = CellSpec {
        input: *f.input.get_or_insert(InputKind::Rgb),
        norm: *f.norm.get_or_insert(NormKind::Bn),
        lambda_align: *f.lambda_align.get_or_insert(0.0),
        roi_k: *f.roi_k.get_or_insert(3),
        seed: *f.seed.get_or_insert(0),
    };
    let config = spec.dyn_config(common.profile(), f.iterations);
    f.iterations = Some(config.iterations);
    if config.iterations == 0 {
        return Err(usage("--iterations must be at least 1"));
    }
    if !spec.lambda_align.is_finite() || spec.lambda_align < 0.0 {
        return Err(usage("--lambda-align must be finite and non-negative"));
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    init_pool(common.jobs())?;
    let data = Dataset::load(common.root(), id).with_context(|| format!("loading {id}"))?;
    check_masks(&data, spec.input, Split::Train)?;
    let start = std::time::Instant::now();
    let (model, log) = train_dyn::<f32>(data.split(Split::Train), config).context("training")?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    model.save(&out).with_context(|| format!("saving {}", out.display()))?;
    log.write_jsonl(&out.with_extension("log.jsonl"))?;
    write_echo(&echo_path(&out), &common, &f)?;
    let last = log.entries.last().map_or(f64::NAN, |e| e.loss);
    println!(
        "{id} {} {}: {} iterations in {:.1} s, final loss {last:.5}, saved to {}",
        spec.input,
        spec.norm,
        config.iterations,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn run_dyn_eval(mut common: Common, mut f: DynEvalFlags) -> Result<(), Failure> {
    common.resolve()?;
    let model_path = required(&f.model, "model")?;
    let targets = required(&f.dataset, "dataset")?;
    if targets.is_empty() {
        return Err(usage("--dataset needs at least one id"));
    }
    if f.source.is_none() {
        f.source = echo_field(&model_path, "dataset");
    }
    let source = f.source.ok_or_else(|| usage("--source is required when the model has no config echo"))?;
    init_pool(common.jobs())?;
    let model = DynModel::<f32>::load(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let c = model.config;
    let spec = CellSpec {
        input: InputKind::from_config(c.input_mode, c.mask_kind),
        norm: c.norm.kind,
        lambda_align: c.lambda_align,
        roi_k: c.roi_k,
        seed: c.seed,
    };
    let mut rows = Vec::new();
    for target in targets {
        let data = Dataset::load(common.root(), target).with_context(|| format!("loading {target}"))?;
        check_masks(&data, spec.input, Split::Test)?;
        let (p1, p2) = evaluate(&model, data.split(Split::Test), spec.input).with_context(|| format!("evaluating on {target}"))?;
        let row = MetricRow::new(source, target, &spec, p1, p2);
        println!("{source} -> {target} ({}): P1 {p1:.3}  P2 {p2:.3}", row.relation.as_str());
        rows.push(row);
    }
    if let Some(dir) = &f.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_csv(&dir.join("metrics.csv"), &rows)?;
        write_echo(&dir.join("dyn-eval.config.json"), &common, &f)?;
    }
    Ok(())
}

fn run_matrix_cmd(mut common: Common, mut f: MatrixFlags) -> Result<(), Failure> {
    common.resolve()?;
    let profile = common.profile();
    let config = MatrixConfig {
        profile,
        sources: f.sources.get_or_insert_with(|| vec!["simb-border".parse().expect("valid id")]).clone(),
        targets: f.targets.get_or_insert_with(|| DatasetId::ALL.to_vec()).clone(),
        inputs: f.inputs.get_or_insert_with(|| vec![InputKind::Rgb]).clone(),
        norms: f.norms.get_or_insert_with(|| NormKind::ALL.to_vec()).clone(),
        lambdas: f.lambdas.get_or_insert_with(|| vec![0.0]).clone(),
        roi_ks: f.roi_ks.get_or_insert_with(|| vec![3]).clone(),
        seeds: f.seeds.get_or_insert_with(|| vec![0, 1, 2]).clone(),
        iterations: Some(*f.iterations.get_or_insert(profile.dyn_config(InputKind::Rgb, NormKind::Bn, 0).iterations)),
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    for (source, spec) in config.models() {
        spec.dyn_config(profile, config.iterations)
            .validate()
            .map_err(|e| usage(format!("{source} {} {}: {e}", spec.input, spec.norm)))?;
    }
    let out = f.out.get_or_insert_with(|| PathBuf::from("results")).clone();
    let cache = f.cache.get_or_insert_with(|| out.join("models")).clone();
    let formats = parse_formats(f.formats.get_or_insert_with(|| vec!["csv".into(), "json".into(), "svg".into()]))?;
    init_pool(common.jobs())?;
    println!("matrix: {} models, {} rows", config.models().len(), config.n_rows());
    let options = RunOptions { cache_dir: Some(cache), jobs: common.jobs() };
    let report = run_matrix(common.root(), &config, &options)?;
    let written = emit_report(&report, &out, &formats)?;
    write_echo(&out.join("matrix.config.json"), &common, &f)?;
    print_report(&report);
    for p in written {
        println!("wrote {}", p.display());
    }
    let failed = report.errors().count();
    if failed > 0 {
        for r in report.errors() {
            eprintln!("failed: {} -> {} {} {} seed {}: {}", r.source, r.target, r.input, r.norm, r.seed, r.error.as_deref().unwrap_or(""));
        }
        return Err(Failure::Runtime(anyhow::anyhow!("{failed} of {} cells failed", report.rows.len())));
    }
    Ok(())
}

fn print_report(report: &ExperimentReport) {
    println!("{:<13} {:<13} {:<9} {:<4} {:>7} {:>3}  {:<17} {:<17}", "source", "target", "input", "norm", "lambda", "k", "P1", "P2");
    for a in report.aggregates() {
        println!(
            "{:<13} {:<13} {:<9} {:<4} {:>7} {:>3}  {:<17} {:<17}",
            a.source.to_string(),
            a.target.to_string(),
            a.input.to_string(),
            a.norm.to_string(),
            a.lambda_align,
            a.roi_k,
            a.p1_text(),
            a.p2_text()
        );
    }
    let c = report.cache;
    println!("models trained {}, loaded {}, reused {}; {:.1} s", c.trained, c.loaded, c.hits, report.wall_seconds);
}

fn unique<T: PartialEq + Copy>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn run_report(mut common: Common, mut f: ReportFlags) -> Result<(), Failure> {
    common.resolve()?;
    let csv = required(&f.csv, "csv")?;
    let out = f.out.get_or_insert_with(|| csv.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)).clone();
    let formats = parse_formats(f.formats.get_or_insert_with(|| vec!["json".into(), "svg".into()]))?;
    let rows = read_csv(&csv)?;
    let config = MatrixConfig {
        profile: common.profile(),
        sources: unique(rows.iter().map(|r| r.source)),
        targets: unique(rows.iter().map(|r| r.target)),
        inputs: unique(rows.iter().map(|r| r.input)),
        norms: unique(rows.iter().map(|r| r.norm)),
        lambdas: unique(rows.iter().map(|r| r.lambda_align)),
        roi_ks: unique(rows.iter().map(|r| r.roi_k)),
        seeds: unique(rows.iter().map(|r| r.seed)),
        iterations: None,
    };
    let report = ExperimentReport { config, rows, cache: Default::default(), wall_seconds: 0.0 };
    let written = emit_report(&report, &out, &formats)?;
    write_echo(&out.join("report.config.json"), &common, &f)?;
    print_report(&report);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run_selfcheck(mut common: Common, f: SelfcheckFlags) -> Result<(), Failure> {
    common.resolve()?;
    init_pool(common.jobs())?;
    let results: Vec<CheckResult> = if f.quick {
        let mut r = selfcheck::physics_suite(10);
        r.extend(selfcheck::norm_suite(20));
        r.extend(selfcheck::structure_suite());
        r
    } else {
        selfcheck::run_all()
    };
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!("{failed} checks failed")));
    }
    Ok(())
}
