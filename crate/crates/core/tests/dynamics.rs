use bdl_core::dataset::{sample_at, GenConfig, MaskKind, VideoRecord, VideoSample, T_REF};
use bdl_core::dynamics::{
    loss, target_centres, train_dyn, train_step, Batch, DynConfig, DynModel, InputMode, MAX_OFFSET,
};
use bdl_core::render::{BBox, Domain};
use bdl_core::sim::ContextKind;
use bdl_tensor::{checkpoint, AdamConfig, Graph, Mode, NormKind, Tensor};

fn video(context: ContextKind, seed: u64) -> VideoRecord {
    VideoRecord::generate(&GenConfig { n_frames: 60, ..GenConfig::desk(context) }, Domain::Sim, seed).unwrap()
}

fn samples(n: usize, horizon: usize) -> Vec<VideoSample> {
    (0..n)
        .map(|i| {
            let v = video(if i % 2 == 0 { ContextKind::Border } else { ContextKind::Split }, 40 + i as u64);
            sample_at(&v, i, horizon, MaskKind::Gt).unwrap()
        })
        .collect()
}

fn config(mode: InputMode) -> DynConfig {
    DynConfig::desk(mode, NormKind::Gn, 3)
}

fn perturb_head(model: &mut DynModel<f32>) {
    for name in ["decoder.fc.weight", "decoder.fc.bias"] {
        let t = model.params.value(name).unwrap();
        let data: Vec<f32> = (0..t.numel()).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.3).collect();
        let shape = t.shape().to_vec();
        model.params.set_value(name, Tensor::from_vec(&shape, data).unwrap()).unwrap();
    }
}

#[test]
fn untrained_head_predicts_the_last_reference_box() {
    for mode in [InputMode::Rgb, InputMode::Mask] {
        let model = DynModel::<f32>::new(config(mode)).unwrap();
        let s = samples(2, 5);
        let preds = model.predict(&s, 5).unwrap();
        for (p, sample) in preds.iter().zip(&s) {
            for step in p {
                for (a, b) in step.iter().zip(&sample.ref_boxes[T_REF - 1]) {
                    let (ca, cb) = (a.center(), b.center());
                    assert!((ca.0 - cb.0).abs() < 1e-4 && (ca.1 - cb.1).abs() < 1e-4, "{mode:?}: {ca:?} vs {cb:?}");
                }
            }
        }
    }
}

#[test]
fn offsets_are_bounded_and_boxes_stay_in_the_image() {
    let mut model = DynModel::<f32>::new(config(InputMode::Mask)).unwrap();
    perturb_head(&mut model);
    let s = samples(3, 40);
    let batch = Batch::<f32>::from_samples(&s, InputMode::Mask).unwrap();
    let mut g = Graph::new();
    let r = model.rollout(&mut g, &batch, 40, Mode::Eval).unwrap();
    let mut moved = 0.0f64;
    for w in r.centres.windows(2) {
        let (a, b) = (g.value(w[0]).data(), g.value(w[1]).data());
        for (x, y) in a.iter().zip(b) {
            let d = (*y as f64 - *x as f64).abs();
            assert!(d <= MAX_OFFSET + 1e-6, "step offset {d}");
            moved = moved.max(d);
        }
    }
    assert!(moved > 0.01, "perturbed head should move boxes");
    let (w, h) = model.config.ref_size;
    for sample_boxes in model.boxes_from(&g, &r, &batch.layout) {
        assert_eq!(sample_boxes.len(), 40);
        for b in sample_boxes.iter().flatten() {
            assert!(b.x_min >= -1e-9 && b.y_min >= -1e-9 && b.x_max <= w + 1e-9 && b.y_max <= h + 1e-9, "{b:?}");
        }
    }
}

#[test]
fn horizon_one_and_zero() {
    let model = DynModel::<f32>::new(config(InputMode::Rgb)).unwrap();
    let s = samples(1, 1);
    assert_eq!(model.predict(&s, 1).unwrap()[0].len(), 1);
    assert!(model.predict(&s, 0).is_err());
}

#[test]
fn single_ball_scenes_roll_out() {
    let mut s = samples(2, 6);
    for sample in &mut s {
        for f in sample.ref_boxes.iter_mut().chain(sample.target_boxes.iter_mut()) {
            f.truncate(1);
        }
    }
    let mut model = DynModel::<f32>::new(config(InputMode::Mask)).unwrap();
    perturb_head(&mut model);
    let preds = model.predict(&s, 6).unwrap();
    assert!(preds.iter().all(|p| p.len() == 6 && p.iter().all(|f| f.len() == 1)));
    assert!(train_step(&mut model, &s, 1e-3, &AdamConfig::default(), 0).unwrap().is_finite());
}

#[test]
fn aligned_features_at_reference_boxes_equal_reference_features() {
    let model = DynModel::<f32>::new(config(InputMode::Mask)).unwrap();
    let mut s = samples(2, 3);
    for sample in &mut s {
        sample.target_boxes[1] = sample.ref_boxes[T_REF - 1].clone();
    }
    let batch = Batch::<f32>::from_samples(&s, InputMode::Mask).unwrap();
    let mut g = Graph::new();
    let fmap = model.encode(&mut g, &batch, Mode::Eval).unwrap();
    let aligned = model.extract_aligned_features(&mut g, fmap, &batch, 3).unwrap();
    let refs: Vec<&[BBox]> = s.iter().map(|x| x.ref_boxes[T_REF - 1].as_slice()).collect();
    let direct = model.extract_state_features(&mut g, fmap, &refs, |i| i).unwrap();
    assert_eq!(g.shape(aligned[1]), g.shape(direct));
    assert_eq!(g.shape(aligned[1])[1], model.config.state_channels());
    assert_eq!(g.value(aligned[1]).data(), g.value(direct).data());
}

#[test]
fn alignment_term_is_additive() {
    let s = samples(2, 4);
    let model = DynModel::<f64>::new(DynConfig { lambda_align: 0.5, ..DynConfig::desk(InputMode::Mask, NormKind::Bn, 1) }).unwrap();
    let batch = Batch::<f64>::from_samples(&s, InputMode::Mask).unwrap();
    let mut g = Graph::new();
    let r = model.rollout(&mut g, &batch, 4, Mode::Train).unwrap();
    let aligned = model.extract_aligned_features(&mut g, r.feature_map, &batch, 4).unwrap();
    let targets = target_centres(&batch, model.config.ref_size, 4).unwrap();
    let base = loss(&mut g, &r.centres, &targets, &[], &[], 0.95, 0.0).unwrap();
    let zero = loss(&mut g, &r.centres, &targets, &r.features, &aligned, 0.95, 0.0).unwrap();
    assert_eq!(g.value(base).item(), g.value(zero).item());
    let with = loss(&mut g, &r.centres, &targets, &r.features, &aligned, 0.95, 0.5).unwrap();
    assert!(g.value(with).item() > g.value(base).item());

    // Perfect predictions cost nothing.
    let perfect: Vec<_> = targets.iter().map(|t| g.constant(t.clone())).collect();
    let l = loss(&mut g, &perfect, &targets, &[], &[], 0.95, 0.0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn training_overfits_eight_samples() {
    let s = samples(8, 20);
    let mut model = DynModel::<f32>::new(DynConfig { iterations: 500, ..config(InputMode::Mask) }).unwrap();
    let adam = AdamConfig { weight_decay: model.config.weight_decay, ..AdamConfig::default() };
    let lr = 1e-3;
    let first = train_step(&mut model, &s, lr, &adam, 0).unwrap();
    let mut best = first;
    for step in 1..500 {
        best = best.min(train_step(&mut model, &s, lr, &adam, step).unwrap());
        if best < 0.1 * first {
            return;
        }
    }
    panic!("loss {first} only fell to {best}");
}

#[test]
fn training_is_deterministic() {
    let videos: Vec<VideoRecord> = (0..3).map(|i| video(ContextKind::Border, 60 + i)).collect();
    let cfg = DynConfig { iterations: 4, ..config(InputMode::Rgb) };
    let (a, la) = train_dyn::<f32>(&videos, cfg).unwrap();
    let (b, lb) = train_dyn::<f32>(&videos, cfg).unwrap();
    assert_eq!(checkpoint::encode(&a.params), checkpoint::encode(&b.params));
    assert_eq!(la.entries.iter().map(|e| e.loss).collect::<Vec<_>>(), lb.entries.iter().map(|e| e.loss).collect::<Vec<_>>());
    let (c, _) = train_dyn::<f32>(&videos, DynConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(checkpoint::encode(&a.params), checkpoint::encode(&c.params));
    assert!(train_dyn::<f32>(&videos[..0], cfg).is_err());
}

#[test]
fn desk_defaults() {
    let c = DynConfig::desk(InputMode::Rgb, NormKind::Bn, 0);
    assert_eq!((c.batch, c.iterations, c.lr, c.weight_decay, c.roi_k, c.gamma), (8, 2000, 2e-4, 1e-6, 3, 0.95));
}
