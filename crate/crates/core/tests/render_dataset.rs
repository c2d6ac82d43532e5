use bdl_core::dataset::{
    flip_augment, read_video, sample_at, window_starts, write_video, GenConfig, MaskKind, Split, VideoRecord, VideoSample, T_REF,
};
use bdl_core::render::{render_gt_mask, Domain, RenderConfig};
use bdl_core::sim::{Borders, ContextKind, EnvContext, Split as Bar};
use proptest::prelude::*;

/// Pixels of an `n`-pixel axis whose centres, mapped to reference units by
/// `scale` pixels per unit, fall in `[lo, hi)`.
fn columns_in(lo: f64, hi: f64, scale: f64, n: usize) -> usize {
    let first = (lo * scale - 0.5).ceil().max(0.0);
    let end = (hi * scale - 0.5).ceil().min(n as f64);
    (end - first).max(0.0) as usize
}

fn border_area(ctx: &EnvContext, cfg: &RenderConfig) -> usize {
    let (w, h) = (ctx.width as f64, ctx.height as f64);
    let (sx, sy) = (cfg.width as f64 / w, cfg.height as f64 / h);
    let b = ctx.borders;
    let strips_x = columns_in(0.0, b.left as f64, sx, cfg.width) + columns_in(w - b.right as f64, w, sx, cfg.width);
    let strips_y = columns_in(0.0, b.top as f64, sy, cfg.height) + columns_in(h - b.bottom as f64, h, sy, cfg.height);
    let bar = ctx.split.map_or(0, |s| {
        let (lo, hi) = s.x_range();
        columns_in(lo, hi, sx, cfg.width)
    });
    cfg.width * cfg.height - (cfg.width - strips_x - bar) * (cfg.height - strips_y)
}

fn context(t: u32, b: u32, l: u32, r: u32, split: Option<u32>) -> EnvContext {
    EnvContext {
        width: 192,
        height: 96,
        borders: Borders { top: t, bottom: b, left: l, right: r },
        split: split.map(|center_x| Bar { center_x, width: 5 }),
    }
}

proptest! {
    #[test]
    fn border_area_matches_closed_form(
        t in 0u32..=15, b in 0u32..=15, l in 0u32..=15, r in 0u32..=15,
        split in proptest::option::of(64u32..=128),
        desk in any::<bool>(),
    ) {
        let ctx = context(t, b, l, r, split);
        let cfg = if desk { RenderConfig::default() } else { RenderConfig { width: 192, height: 96 } };
        prop_assert_eq!(render_gt_mask(&ctx, &cfg).border_count(), border_area(&ctx, &cfg));
    }

    #[test]
    fn double_flip_of_a_sample_is_identity(seed in 0u64..1000, h in any::<bool>(), v in any::<bool>()) {
        let video = VideoRecord::generate(&small(ContextKind::Split), Domain::Sim, seed).unwrap();
        let s = sample_at(&video, 3, 5, MaskKind::Gt).unwrap();
        let back = flip_augment(&flip_augment(&s, h, v), h, v);
        prop_assert_eq!(&back.ref_images, &s.ref_images);
        prop_assert_eq!(&back.mask, &s.mask);
        let flat = |x: &VideoSample| -> Vec<f64> {
            x.ref_boxes.iter().chain(&x.target_boxes).flatten().flat_map(|b| b.to_array()).collect()
        };
        for (a, b) in flat(&back).iter().zip(flat(&s)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn full_resolution_border_area_example() {
    // 3 + 5 columns, 2 + 4 rows and a 5-column bar.
    let ctx = context(2, 4, 3, 5, Some(96));
    let cfg = RenderConfig { width: 192, height: 96 };
    assert_eq!(render_gt_mask(&ctx, &cfg).border_count(), 192 * 96 - (192 - 8 - 5) * (96 - 6));
}

#[test]
fn centred_split_bar_is_mirror_symmetric_at_desk_scale() {
    let ctx = context(0, 0, 0, 0, Some(96));
    let mask = render_gt_mask(&ctx, &RenderConfig::default());
    assert_eq!(mask.flipped(true, false), mask);
    assert_eq!((0..48).filter(|&x| mask.is_border(x, 10)).collect::<Vec<_>>(), [23, 24]);
    // 192 pixel centres cannot hold an odd-width bar symmetrically.
    let full = render_gt_mask(&ctx, &RenderConfig { width: 192, height: 96 });
    assert_eq!((0..192).filter(|&x| full.is_border(x, 50)).collect::<Vec<_>>(), [93, 94, 95, 96, 97]);
}

fn small(context: ContextKind) -> GenConfig {
    GenConfig { n_frames: 50, ..GenConfig::desk(context) }
}

#[test]
fn domains_share_geometry_and_differ_in_appearance() {
    for context in [ContextKind::Border, ContextKind::Split] {
        let config = GenConfig::desk(context);
        let sim = VideoRecord::generate(&config, Domain::Sim, 17).unwrap();
        let blen = VideoRecord::generate(&config, Domain::Blenlike, 17).unwrap();
        assert_eq!(sim.gt_mask, blen.gt_mask);
        assert_eq!(sim.bboxes, blen.bboxes);
        assert_eq!(sim.trajectory, blen.trajectory);
        let gap: f64 = sim.frames.iter().zip(&blen.frames).map(|(a, b)| a.mean_abs_diff(b)).sum::<f64>() / sim.frames.len() as f64;
        assert!(gap >= 0.05, "{context:?}: mean gap {gap}");
        assert_eq!(VideoRecord::generate(&config, Domain::Blenlike, 17).unwrap(), blen);
    }
}

#[test]
fn box_centres_are_trajectory_centres() {
    let v = VideoRecord::generate(&small(ContextKind::Border), Domain::Sim, 3).unwrap();
    for (boxes, balls) in v.bboxes.iter().zip(&v.trajectory.frames) {
        assert_eq!(boxes.len(), balls.len());
        for (bx, ball) in boxes.iter().zip(balls) {
            assert_eq!(bx.center(), ball.center);
        }
    }
}

#[test]
fn video_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = VideoRecord::generate(&GenConfig::desk(ContextKind::Split), Domain::Blenlike, 9).unwrap();
    v.self_mask = Some(v.gt_mask.flipped(true, false));
    write_video(&v, dir.path()).unwrap();
    let frames = std::fs::read_dir(dir.path().join("frames")).unwrap().count();
    assert_eq!(frames, 100);
    let mut top: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["annot.json", "frames", "mask.png", "mask_self.png"]);
    assert_eq!(read_video(dir.path()).unwrap(), v);
}

#[test]
fn missing_annotation_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_video(&dir.path().join("video_0042")).unwrap_err().to_string();
    assert!(err.contains("video_0042") && err.contains("annot.json"), "{err}");
}

#[test]
fn window_boundaries() {
    assert_eq!(window_starts(44, Split::Test).len(), 1);
    assert_eq!(window_starts(43, Split::Test).len(), 0);
    assert_eq!(window_starts(T_REF + 20, Split::Train).len(), 1);
    let v = VideoRecord::generate(&small(ContextKind::Border), Domain::Sim, 1).unwrap();
    assert!(sample_at(&v, 0, 1, MaskKind::Sup).is_none());
    let s = sample_at(&v, 6, 40, MaskKind::Gt).unwrap();
    assert_eq!((s.ref_boxes.len(), s.horizon()), (T_REF, 40));
    assert_eq!(s.target_boxes[0], v.bboxes[6 + T_REF]);
}
