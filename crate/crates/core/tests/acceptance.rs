//! Acceptance suite: one pass/fail line per criterion.
//!
//! Trained models, generated datasets and stage timings are kept under
//! `target/acceptance`, so only the first run pays for training. Set
//! `BDL_ACCEPTANCE_FRESH=1` to discard them, or `BDL_ACCEPTANCE_DIR` to move them.

mod common;

use bdl_core::dataset::{self, window_starts, Dataset, DatasetId, GenConfig, MaskKind, Split, VideoRecord, TEST_HORIZON};
use bdl_core::dynamics::windows;
use bdl_core::eval::{metric_p1_p2, run_matrix, ExperimentReport, InputKind, MatrixConfig, MetricRow, RunOptions, ScaleProfile};
use bdl_core::render::{BBox, Domain};
use bdl_core::seg::{iou, pseudo_labels, segment_dataset, InpaintConfig, LabelSource, SELF_MASK_IOU_THRESHOLD};
use bdl_core::selfcheck::{gradcheck_suite, norm_suite, structure_suite, CheckResult};
use bdl_core::sim::{max_penetration, rollout, BallState, ContextKind, SceneConfig};
use bdl_tensor::nn::NormKind;
use bdl_tensor::{Graph, Roi, Tensor};
use common::{max_position_error, SubstepOracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Training length of the GT-mask models; the identity does not depend on
/// the weights.
const GT_MASK_ITERATIONS: usize = 200;

struct Outcome {
    passed: bool,
    summary: String,
}

fn outcome(passed: bool, summary: impl Into<String>) -> Outcome {
    Outcome { passed, summary: summary.into() }
}

fn report(lines: &mut Vec<(u32, bool, String)>, id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
    });
    let line = format!(
        "criterion {id:>2} {} {name}: {} [{:.1} s]",
        if o.passed { "PASS" } else { "FAIL" },
        o.summary,
        start.elapsed().as_secs_f64()
    );
    eprintln!("{line}");
    lines.push((id, o.passed, line));
    o.passed
}

fn suite_outcome(results: &[CheckResult]) -> Outcome {
    let failed: Vec<&CheckResult> = results.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        eprintln!("    {r}");
    }
    outcome(failed.is_empty(), format!("{} of {} checks pass", results.len() - failed.len(), results.len()))
}

// ------------------------------------------------------------------ 1, 2

fn physics() -> Outcome {
    let start = Instant::now();
    let oracle = SubstepOracle { dt: 1e-4 };
    let (mut energy, mut penetration, mut error, mut n) = (0.0f64, 0usize, 0.0f64, 0usize);
    for context in [ContextKind::Border, ContextKind::Split] {
        let cfg = SceneConfig::new(context);
        for seed in 0..50 {
            let t = rollout(&cfg, seed, 100).expect("scene generates");
            let e0: f64 = t.frames[0].iter().map(BallState::kinetic_energy).sum();
            for f in &t.frames {
                let e: f64 = f.iter().map(BallState::kinetic_energy).sum();
                energy = energy.max((e - e0).abs() / e0);
                penetration += usize::from(max_penetration(&t.context, f) > 1e-9);
            }
            error = error.max(max_position_error(&oracle.run(&t.context, &t.frames[0], 100), &t.frames));
            n += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        energy <= 1e-9 && penetration == 0 && error < 1e-5 && secs < 60.0,
        format!(
            "{n} trajectories of 100 frames, energy drift {energy:.1e}, {penetration} penetrating frames, oracle error {error:.1e} px, {secs:.1} s"
        ),
    )
}

fn windowing() -> Outcome {
    let (train, test) = (window_starts(100, Split::Train).len(), window_starts(100, Split::Test).len());
    let cfg = GenConfig::desk(ContextKind::Border);
    let videos: Vec<VideoRecord> = cfg.videos()[..2].iter().map(|&(_, _, s)| VideoRecord::generate(&cfg, Domain::Sim, s).unwrap()).collect();
    let (wt, ws) = (windows(&videos, Split::Train).len(), windows(&videos, Split::Test).len());
    outcome(
        (train, test, wt, ws) == (77, 57, 154, 114),
        format!("{train} train / {test} test windows per 100-frame video; {wt} / {ws} over two generated videos"),
    )
}

// ------------------------------------------------------------------ 5

fn roi(x: &Tensor<f64>, rois: &[Roi], k: usize, scale: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.roi_align(v, rois, k, scale, 2).unwrap();
    g.value(y).data().to_vec()
}

fn roi_align() -> Outcome {
    let (h, w, scale) = (12, 16, 0.25);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Boxes whose sample points stay inside the map, in image coordinates.
    let rois: Vec<Roi> = (0..40)
        .map(|_| {
            let (x0, y0) = (rng.random_range(4.0..30.0), rng.random_range(4.0..20.0));
            let (bw, bh) = (rng.random_range(2.0..28.0), rng.random_range(2.0..22.0));
            Roi { batch: 0, x0, y0, x1: x0 + bw, y1: y0 + bh }
        })
        .collect();
    let mut worst = [0.0f64; 3];
    for k in [1, 3, 5] {
        let constant = Tensor::from_vec(&[1, 1, h, w], vec![2.75; h * w]).unwrap();
        worst[0] = roi(&constant, &rois, k, scale).iter().map(|v| (v - 2.75).abs()).fold(worst[0], f64::max);

        let (a, bx, by) = (0.3, 0.7, -1.1);
        let ramp: Vec<f64> = (0..h).flat_map(|y| (0..w).map(move |x| a + bx * x as f64 + by * y as f64)).collect();
        let got = roi(&Tensor::from_vec(&[1, 1, h, w], ramp).unwrap(), &rois, k, scale);
        for (r, bins) in rois.iter().zip(got.chunks(k * k)) {
            let (bw, bh) = ((r.x1 - r.x0) * scale / k as f64, (r.y1 - r.y0) * scale / k as f64);
            for (b, v) in bins.iter().enumerate() {
                let cx = r.x0 * scale - 0.5 + (b % k) as f64 * bw + bw / 2.0;
                let cy = r.y0 * scale - 0.5 + (b / k) as f64 * bh + bh / 2.0;
                worst[1] = worst[1].max((v - (a + bx * cx + by * cy)).abs());
            }
        }

        let base = Tensor::uniform(&[1, 2, h, w], 1.0, &mut rng);
        let (dx, dy) = (2usize, 1usize);
        let mut shifted = vec![0.0; 2 * h * w];
        for c in 0..2 {
            for y in dy..h {
                for x in dx..w {
                    shifted[(c * h + y) * w + x] = base.data()[(c * h + y - dy) * w + x - dx];
                }
            }
        }
        let moved: Vec<Roi> = rois
            .iter()
            .map(|r| Roi { x0: r.x0 + dx as f64 / scale, x1: r.x1 + dx as f64 / scale, y0: r.y0 + dy as f64 / scale, y1: r.y1 + dy as f64 / scale, ..*r })
            .filter(|r| r.x1 * scale < w as f64 - 0.5 && r.y1 * scale < h as f64 - 0.5)
            .collect();
        let originals: Vec<Roi> = moved
            .iter()
            .map(|r| Roi { x0: r.x0 - dx as f64 / scale, x1: r.x1 - dx as f64 / scale, y0: r.y0 - dy as f64 / scale, y1: r.y1 - dy as f64 / scale, ..*r })
            .collect();
        let a1 = roi(&base, &originals, k, scale);
        let a2 = roi(&Tensor::from_vec(&[1, 2, h, w], shifted).unwrap(), &moved, k, scale);
        worst[2] = a1.iter().zip(&a2).map(|(p, q)| (p - q).abs()).fold(worst[2], f64::max);
    }
    outcome(
        worst.iter().all(|&e| e < 1e-6),
        format!("k in {{1,3,5}}: constant map {:.1e}, linear ramp {:.1e}, translation {:.1e}", worst[0], worst[1], worst[2]),
    )
}

// ------------------------------------------------------------------ 10

fn metric_sanity() -> Outcome {
    let (w, h) = (192.0, 96.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gt: Vec<Vec<BBox>> = (0..TEST_HORIZON)
        .map(|_| (0..3).map(|_| BBox::from_center(((rng.random_range(8..180)) as f64, (rng.random_range(8..88)) as f64), 4.0)).collect())
        .collect();
    let shift = |dx: f64, dy: f64| -> Vec<Vec<BBox>> {
        gt.iter().map(|f| f.iter().map(|b| BBox::from_center((b.center().0 + dx * w, b.center().1 + dy * h), 4.0)).collect()).collect()
    };
    let exact = 1.0 / 128.0;
    let want = exact * exact * 1000.0;
    let (px, py) = (metric_p1_p2(&shift(exact, 0.0), &gt, (w, h)).unwrap(), metric_p1_p2(&shift(0.0, -exact), &gt, (w, h)).unwrap());
    let near = metric_p1_p2(&shift(0.01, 0.0), &gt, (w, h)).unwrap();
    let passed = px == (want, want) && py == (want, want) && (near.0 - 0.1).abs() < 1e-12 && (near.1 - 0.1).abs() < 1e-12;
    outcome(
        passed,
        format!("delta 2^-7 gives ({}, {}) in x and ({}, {}) in y, expected {want}; delta 0.01 gives ({:.15}, {:.15})", px.0, px.1, py.0, py.1, near.0, near.1),
    )
}

// ------------------------------------------------------------------ desk pipeline

struct Desk {
    data: PathBuf,
    models: PathBuf,
    timings_path: PathBuf,
    timings: BTreeMap<String, f64>,
}

impl Desk {
    fn open() -> Desk {
        let dir = std::env::var_os("BDL_ACCEPTANCE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"));
        if std::env::var("BDL_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1") && dir.exists() {
            fs::remove_dir_all(&dir).expect("clear acceptance cache");
        }
        fs::create_dir_all(&dir).expect("create acceptance cache");
        let timings_path = dir.join("timings.json");
        let timings = fs::read_to_string(&timings_path).ok().and_then(|t| serde_json::from_str(&t).ok()).unwrap_or_default();
        Desk { data: dir.join("data"), models: dir.join("models"), timings_path, timings }
    }

    fn record(&mut self, stage: &str, seconds: f64) {
        self.timings.insert(stage.to_string(), seconds);
        fs::write(&self.timings_path, serde_json::to_string_pretty(&self.timings).unwrap()).expect("write timings");
    }

    /// Generate any dataset that is missing or stale; returns seconds spent.
    fn datasets(&self) -> f64 {
        let start = Instant::now();
        for context in [ContextKind::Border, ContextKind::Split] {
            let cfg = GenConfig::desk(context);
            let ids = DatasetId::ALL.into_iter().filter(|d| d.context == context);
            let fresh = ids.clone().all(|id| Dataset::load(&self.data, id).is_ok_and(|d| d.meta.config == cfg));
            if !fresh {
                let _ = fs::remove_dir_all(self.data.join(context.as_str()));
                for id in ids {
                    dataset::generate(&self.data, id, &cfg, 1).expect("dataset generates");
                }
            }
        }
        start.elapsed().as_secs_f64()
    }

    fn load(&self, id: DatasetId) -> Dataset {
        Dataset::load(&self.data, id).expect("dataset loads")
    }

    fn matrix(&self, config: &MatrixConfig) -> ExperimentReport {
        let options = RunOptions { cache_dir: Some(self.models.clone()), jobs: 1 };
        let report = run_matrix(&self.data, config, &options).expect("valid matrix");
        for r in report.errors() {
            eprintln!("    error row {} -> {} {} {} seed {}: {}", r.source, r.target, r.input, r.norm, r.seed, r.error.as_deref().unwrap_or(""));
        }
        report
    }
}

fn sim(context: ContextKind) -> DatasetId {
    DatasetId::new(Domain::Sim, context)
}

fn blen(context: ContextKind) -> DatasetId {
    DatasetId::new(Domain::Blenlike, context)
}

/// Criterion 8, which also stores the self masks the mask matrix reads.
fn self_masks(desk: &mut Desk) -> Outcome {
    let start = Instant::now();
    let mut scores = Vec::new();
    for context in [ContextKind::Border, ContextKind::Split] {
        let d = desk.load(sim(context));
        for split in [Split::Train, Split::Test] {
            let videos = d.split(split);
            let labels = pseudo_labels(videos, &InpaintConfig::default()).expect("k-means labels");
            scores.extend(labels.iter().zip(videos).map(|(l, v)| iou(&l.mask, &v.gt_mask).unwrap()[1]));
        }
    }
    let pseudo = scores.iter().sum::<f64>() / scores.len() as f64;
    let worst = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mut model_scores = Vec::new();
    for id in [sim(ContextKind::Border), blen(ContextKind::Border)] {
        let mut d = desk.load(id);
        let seg = segment_dataset(&d, LabelSource::Kmeans, ScaleProfile::Desk.seg_config(0)).expect("segmentation trains");
        d.store_masks(&desk.data, MaskKind::SelfSup, &seg.masks).expect("masks stored");
        if id.domain == Domain::Sim {
            for (split, i, m) in &seg.masks {
                model_scores.push(iou(m, &d.split(*split)[*i].gt_mask).unwrap()[1]);
            }
        }
    }
    let model = model_scores.iter().sum::<f64>() / model_scores.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    desk.record("self_masks", secs);
    outcome(
        pseudo >= SELF_MASK_IOU_THRESHOLD && secs < 300.0,
        format!(
            "k-means border IoU {pseudo:.4} mean (worst {worst:.3}) over {} Sim videos, threshold {SELF_MASK_IOU_THRESHOLD}; segmenter trained on them scores {model:.4}; {secs:.1} s",
            scores.len()
        ),
    )
}

fn rows_where<'a>(report: &'a ExperimentReport, target: DatasetId, norm: NormKind) -> Vec<&'a MetricRow> {
    report.select(|r| r.target == target && r.norm == norm)
}

fn mean_p2(rows: &[&MetricRow]) -> f64 {
    rows.iter().map(|r| r.p2).sum::<f64>() / rows.len().max(1) as f64
}

fn gt_mask_identity(desk: &Desk) -> Outcome {
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for context in [ContextKind::Border, ContextKind::Split] {
        let mut cfg = MatrixConfig::new(vec![sim(context)], vec![sim(context), blen(context)], vec![InputKind::GtMask], vec![NormKind::Bn]);
        cfg.seeds = SEEDS.to_vec();
        cfg.iterations = Some(GT_MASK_ITERATIONS);
        let report = desk.matrix(&cfg);
        for seed in SEEDS {
            let find = |t: DatasetId| report.select(|r| r.target == t && r.seed == seed).first().map(|r| (r.p1, r.p2));
            match (find(sim(context)), find(blen(context))) {
                (Some(a), Some(c)) => {
                    compared += 1;
                    if a.0.to_bits() != c.0.to_bits() || a.1.to_bits() != c.1.to_bits() {
                        mismatched.push(format!("{context:?} seed {seed}: {a:?} vs {c:?}"));
                    }
                }
                _ => mismatched.push(format!("{context:?} seed {seed}: missing row")),
            }
        }
    }
    for m in &mismatched {
        eprintln!("    {m}");
    }
    outcome(
        compared == 6 && mismatched.is_empty(),
        format!("{compared} (context, seed) pairs compared, {} differ in any bit", mismatched.len()),
    )
}

fn directional(desk: &mut Desk, data_seconds: f64, mask_seconds: f64) -> Outcome {
    let start = Instant::now();
    let border = ContextKind::Border;
    let aligned = sim(border);
    let (domain, context) = (blen(border), sim(ContextKind::Split));
    let mut rgb = MatrixConfig::new(vec![aligned], vec![aligned, domain, context], vec![InputKind::Rgb], NormKind::ALL.to_vec());
    rgb.seeds = SEEDS.to_vec();
    let rgb = desk.matrix(&rgb);
    let mut masked = MatrixConfig::new(vec![aligned], vec![aligned, domain], vec![InputKind::SelfMask], vec![NormKind::Bn]);
    masked.seeds = SEEDS.to_vec();
    let masked = desk.matrix(&masked);
    let trained = rgb.cache.trained + masked.cache.trained;
    let secs = start.elapsed().as_secs_f64() + data_seconds + mask_seconds;
    let runtime = if trained == 15 {
        desk.record("directional", secs);
        format!("{secs:.0} s this run")
    } else {
        match desk.timings.get("directional") {
            Some(t) => format!("{trained} of 15 models trained this run; the run that trained all took {t:.0} s"),
            None => format!("{trained} of 15 models trained this run ({secs:.0} s); no full-run timing recorded"),
        }
    };
    let full_secs = if trained == 15 { Some(secs) } else { desk.timings.get("directional").copied() };

    let mut ok = !rgb.has_errors() && !masked.has_errors() && rgb.rows.len() == 36 && masked.rows.len() == 6;
    let mut cells = Vec::new();
    for norm in NormKind::ALL {
        let (a, d, c) = (
            mean_p2(&rows_where(&rgb, aligned, norm)),
            mean_p2(&rows_where(&rgb, domain, norm)),
            mean_p2(&rows_where(&rgb, context, norm)),
        );
        let (pa, pb) = (d > a, c >= 2.0 * a);
        ok &= pa && pb;
        cells.push(format!("{norm}: aligned {a:.3}, cross-domain {d:.3}{}, cross-context {c:.3}{}", mark(pa), mark(pb)));
    }
    let self_cross = mean_p2(&rows_where(&masked, domain, NormKind::Bn));
    let self_aligned = mean_p2(&rows_where(&masked, aligned, NormKind::Bn));
    let rgb_cross = mean_p2(&rows_where(&rgb, domain, NormKind::Bn));
    let pc = self_cross < rgb_cross;
    ok &= pc;
    ok &= full_secs.is_some_and(|s| s <= 7200.0);
    for c in &cells {
        eprintln!("    {c}");
    }
    eprintln!("    self_mask bn: aligned {self_aligned:.3}, cross-domain {self_cross:.3}{} vs rgb bn cross-domain {rgb_cross:.3}", mark(pc));
    outcome(ok, format!("mean P2 over seeds {SEEDS:?}, (a) and (b) checked for every norm, (c) for bn; {runtime}"))
}

fn mark(ok: bool) -> &'static str {
    if ok {
        " ok"
    } else {
        " (direction violated)"
    }
}

fn wants_to_run() -> bool {
    // Plain `cargo test <filter>` passes the filter through; run only when it
    // names this suite.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    filters.is_empty() || filters.iter().any(|f| "acceptance".contains(f.as_str()))
}

fn main() {
    if !wants_to_run() || std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut lines = Vec::new();
    let l = &mut lines;
    report(l, 1, "physics suite", physics);
    report(l, 2, "windowing", windowing);
    report(l, 3, "autograd suite", || {
        let start = Instant::now();
        let mut o = suite_outcome(&gradcheck_suite());
        let secs = start.elapsed().as_secs_f64();
        o.passed &= secs < 120.0;
        o.summary = format!("{} (f64, eps 1e-5, rel < 1e-4), {secs:.1} s", o.summary);
        o
    });
    report(l, 4, "normalization equivalences", || suite_outcome(&norm_suite(100)));
    report(l, 5, "RoI align oracles", roi_align);
    report(l, 6, "interaction structure", || suite_outcome(&structure_suite()));
    report(l, 10, "metric sanity", metric_sanity);

    let mut desk = Desk::open();
    let data_seconds = desk.datasets();
    let mut mask_seconds = 0.0;
    report(l, 8, "self-mask quality", || {
        let o = self_masks(&mut desk);
        mask_seconds = desk.timings["self_masks"];
        o
    });
    report(l, 7, "GT-mask cross-domain identity", || gt_mask_identity(&desk));
    report(l, 9, "directional desk replication", || directional(&mut desk, data_seconds, mask_seconds));

    lines.sort_by_key(|l| l.0);
    println!();
    for (_, _, line) in &lines {
        println!("{line}");
    }
    let passed = lines.iter().filter(|l| l.1).count();
    println!("{passed} of {} criteria pass", lines.len());
}
