use std::path::Path;

use bdl_core::dataset::{generate, DatasetId, GenConfig};
use bdl_core::eval::{
    emit_report, metric_p1_p2, read_csv, run_matrix, write_csv, CellSpec, EvalError, ExperimentReport, InputKind,
    MatrixConfig, MetricRow, ReportFormat, RunOptions,
};
use bdl_core::render::BBox;
use bdl_tensor::NormKind;
use proptest::prelude::*;
use tempfile::TempDir;

fn id(s: &str) -> DatasetId {
    s.parse().unwrap()
}

fn tiny_root(ids: &[&str]) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for s in ids {
        let d = id(s);
        let config = GenConfig { n_train: 2, n_test: 1, n_frames: 48, ..GenConfig::desk(d.context) };
        generate(dir.path(), d, &config, 1).unwrap();
    }
    dir
}

fn quick(sources: &[&str], targets: &[&str], input: InputKind) -> MatrixConfig {
    let mut c = MatrixConfig::new(sources.iter().map(|s| id(s)).collect(), targets.iter().map(|s| id(s)).collect(), vec![input], vec![NormKind::Gn]);
    c.iterations = Some(2);
    c
}

fn run(root: &Path, config: &MatrixConfig, cache: Option<&Path>) -> ExperimentReport {
    run_matrix(root, config, &RunOptions { cache_dir: cache.map(Path::to_path_buf), jobs: 1 }).unwrap()
}

#[test]
fn two_by_two_by_three_seeds_gives_twelve_rows() {
    let root = tiny_root(&["simb-border", "blenb-border"]);
    let config = quick(&["simb-border", "blenb-border"], &["simb-border", "blenb-border"], InputKind::Rgb);
    assert_eq!(config.n_rows(), 12);
    let report = run(root.path(), &config, None);
    assert_eq!(report.rows.len(), 12);
    assert!(!report.has_errors());
    assert_eq!((report.cache.trained, report.cache.hits), (6, 6));
    let seeds: Vec<u64> = report.rows.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, [0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
}

#[test]
fn one_model_serves_all_four_targets_and_checkpoints_are_reused() {
    let all = ["simb-border", "blenb-border", "simb-split", "blenb-split"];
    let root = tiny_root(&all);
    let mut config = quick(&["simb-border"], &all, InputKind::GtMask);
    config.seeds = vec![0];
    let cache = root.path().join("models");
    let first = run(root.path(), &config, Some(&cache));
    assert_eq!((first.cache.trained, first.cache.loaded, first.cache.hits), (1, 0, 3));
    let second = run(root.path(), &config, Some(&cache));
    assert_eq!((second.cache.trained, second.cache.loaded, second.cache.hits), (0, 1, 3));
    assert_eq!(first.rows, second.rows);

    // GT masks hide the rendering domain.
    assert_eq!((first.rows[0].p1, first.rows[0].p2), (first.rows[1].p1, first.rows[1].p2));
    assert_eq!((first.rows[2].p1, first.rows[2].p2), (first.rows[3].p1, first.rows[3].p2));

    // A changed schedule must not reuse the checkpoint.
    config.iterations = Some(3);
    assert_eq!(run(root.path(), &config, Some(&cache)).cache.trained, 1);
}

#[test]
fn missing_masks_become_error_rows() {
    let root = tiny_root(&["simb-border"]);
    let mut config = quick(&["simb-border"], &["simb-border", "simb-split"], InputKind::SelfMask);
    config.seeds = vec![0];
    let report = run(root.path(), &config, None);
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.errors().count(), 2);
    assert!(report.rows.iter().all(|r| r.p1.is_nan()));
}

#[test]
fn invalid_matrix_is_rejected_up_front() {
    let root = tempfile::tempdir().unwrap();
    let mut config = quick(&["simb-border"], &["simb-border"], InputKind::Rgb);
    config.roi_ks = vec![4];
    assert!(matches!(run_matrix(root.path(), &config, &RunOptions::default()), Err(EvalError::Config(_))));
    config.roi_ks = vec![3];
    config.norms.clear();
    assert!(matches!(run_matrix(root.path(), &config, &RunOptions::default()), Err(EvalError::Config(_))));
}

#[test]
fn empty_report_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let report = ExperimentReport {
        config: quick(&["simb-border"], &["simb-border"], InputKind::Rgb),
        rows: Vec::new(),
        cache: Default::default(),
        wall_seconds: 0.0,
    };
    assert!(matches!(emit_report(&report, dir.path(), &[ReportFormat::Csv]), Err(EvalError::EmptyReport)));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn report_files_and_table_formatting() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick(&["simb-border"], &["simb-border", "blenb-border"], InputKind::Rgb);
    let rows: Vec<MetricRow> = [(0, 1.0, 9.0), (1, 2.0, 10.0), (2, 3.0, 11.0)]
        .iter()
        .flat_map(|&(seed, p1, p2)| {
            let spec = CellSpec::new(InputKind::Rgb, NormKind::Gn, seed);
            [MetricRow::new(id("simb-border"), id("simb-border"), &spec, p1, p2), MetricRow::new(id("simb-border"), id("blenb-border"), &spec, p1 * 2.0, p2 * 2.0)]
        })
        .collect();
    let report = ExperimentReport { config, rows, cache: Default::default(), wall_seconds: 1.0 };
    let files = emit_report(&report, dir.path(), &[ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg]).unwrap();
    assert_eq!(files.len(), 3);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let aligned = &summary["aggregates"][0];
    // Sample standard deviation over three seeds.
    assert_eq!(aligned["p1"], "2.000 ± 1.000");
    assert_eq!(aligned["p2"], "10.000 ± 1.000");
    let svg = std::fs::read_to_string(dir.path().join("bars_simb-border_rgb.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("blenb-border"));
}

fn arb_row() -> impl Strategy<Value = MetricRow> {
    let ids = prop::sample::select(DatasetId::ALL.to_vec());
    (ids.clone(), ids, prop::sample::select(InputKind::ALL.to_vec()), prop::sample::select(NormKind::ALL.to_vec()), 0.0f64..10.0, prop::sample::select(vec![1usize, 3, 5]), any::<u64>(), any::<f64>(), 0.0f64..1e6)
        .prop_filter("finite", |t| t.7.is_finite())
        .prop_map(|(s, t, input, norm, lambda_align, roi_k, seed, p1, p2)| {
            MetricRow::new(s, t, &CellSpec { input, norm, lambda_align, roi_k, seed }, p1, p2)
        })
}

fn centre_box(x: f64, y: f64) -> BBox {
    BBox::from_center((x, y), 4.0)
}

fn trajectory(points: &[(f64, f64)]) -> Vec<Vec<BBox>> {
    (0..40).map(|t| points.iter().map(|&(x, y)| centre_box(x + t as f64 * 0.5, y)).collect()).collect()
}

proptest! {
    #[test]
    fn csv_round_trips(rows in prop::collection::vec(arb_row(), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_csv(&path, &rows).unwrap();
        prop_assert_eq!(read_csv(&path).unwrap(), rows);
    }

    #[test]
    fn metric_matches_direct_sum_and_is_flip_invariant(
        gt in prop::collection::vec((10.0f64..150.0, 10.0f64..80.0), 1..4),
        noise in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 40 * 3),
        h in any::<bool>(), v in any::<bool>(),
    ) {
        let truth = trajectory(&gt);
        let pred: Vec<Vec<BBox>> = truth
            .iter()
            .enumerate()
            .map(|(t, f)| f.iter().enumerate().map(|(i, b)| {
                let (dx, dy) = noise[t * 3 + i];
                let c = b.center();
                centre_box(c.0 + dx, c.1 + dy)
            }).collect())
            .collect();
        let (p1, p2) = metric_p1_p2(&pred, &truth, (192.0, 96.0)).unwrap();

        let mut expected = [0.0f64; 2];
        for t in 0..40 {
            for i in 0..gt.len() {
                let (dx, dy) = noise[t * 3 + i];
                expected[t / 20] += ((dx / 192.0).powi(2) + (dy / 96.0).powi(2)) * 1000.0 / (20.0 * gt.len() as f64);
            }
        }
        prop_assert!((p1 - expected[0]).abs() <= 1e-9 * expected[0].max(1.0));
        prop_assert!((p2 - expected[1]).abs() <= 1e-9 * expected[1].max(1.0));

        let flip = |x: &[Vec<BBox>]| -> Vec<Vec<BBox>> { x.iter().map(|f| f.iter().map(|b| b.flipped(h, v, 192.0, 96.0)).collect()).collect() };
        let (f1, f2) = metric_p1_p2(&flip(&pred), &flip(&truth), (192.0, 96.0)).unwrap();
        prop_assert!((f1 - p1).abs() <= 1e-9 * p1.max(1.0) && (f2 - p2).abs() <= 1e-9 * p2.max(1.0));
    }
}

#[test]
fn metric_rejects_mismatched_shapes() {
    let t = trajectory(&[(50.0, 50.0)]);
    assert!(matches!(metric_p1_p2(&t[..20], &t[..20], (192.0, 96.0)), Err(EvalError::Horizon { .. })));
    let two = trajectory(&[(50.0, 50.0), (80.0, 40.0)]);
    assert!(matches!(metric_p1_p2(&t, &two, (192.0, 96.0)), Err(EvalError::Shape(_))));
    assert_eq!(metric_p1_p2(&two, &two, (192.0, 96.0)).unwrap(), (0.0, 0.0));
}
