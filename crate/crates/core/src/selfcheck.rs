//! Invariant suites runnable from the command line.

use crate::dataset::{sample_at, GenConfig, MaskKind, Split, VideoRecord, TEST_HORIZON, TRAIN_HORIZON};
use crate::dynamics::{loss, target_centres, Batch, DynConfig, DynModel, InputMode, F_R_PREFIX};
use crate::render::{BBox, Domain};
use crate::sim::{max_penetration, rollout, rollout_from, BallState, ContextKind, SceneConfig, SceneState};
use bdl_tensor::nn::{Backbone, BackboneSpec, Mode, Norm, NormKind, NormSpec};
use bdl_tensor::{finite_diff_gradcheck, GradCheckConfig, Graph, ParameterSet, Result as TResult, Roi, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {} {}: {}", if self.passed { "pass" } else { "FAIL" }, self.suite, self.name, self.detail)
    }
}

fn result(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult { suite, name: name.into(), passed, detail: detail.into() }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// Energy, penetration and time reversal over `per_context` trajectories of
/// 100 frames in each context.
pub fn physics_suite(per_context: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for context in [ContextKind::Border, ContextKind::Split] {
        let cfg = SceneConfig::new(context);
        let (mut energy, mut penetration, mut reversal) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
        let mut error = None;
        for seed in 0..per_context {
            let t = match rollout(&cfg, seed, 100) {
                Ok(t) => t,
                Err(e) => {
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            };
            let e0: f64 = t.frames[0].iter().map(BallState::kinetic_energy).sum();
            for f in &t.frames {
                let e: f64 = f.iter().map(BallState::kinetic_energy).sum();
                energy = energy.max((e - e0).abs() / e0);
                penetration = penetration.max(max_penetration(&t.context, f));
            }
            let mut end = SceneState { context: t.context, balls: t.frames[30].clone() };
            for b in &mut end.balls {
                b.velocity = (-b.velocity.0, -b.velocity.1);
            }
            if let Ok(back) = rollout_from(end, seed, 31) {
                for (a, b) in back.frames[30].iter().zip(&t.frames[0]) {
                    reversal = reversal.max((a.center.0 - b.center.0).abs().max((a.center.1 - b.center.1).abs()));
                }
            }
        }
        let name = |what: &str| format!("{what} ({context:?}, {per_context} trajectories)");
        if let Some(e) = error {
            out.push(result("physics", name("rollout"), false, e));
            continue;
        }
        out.push(result("physics", name("energy"), energy <= 1e-9, format!("max relative drift {energy:.2e}")));
        out.push(result("physics", name("penetration"), penetration <= 1e-9, format!("max overlap {penetration:.2e} px")));
        out.push(result("physics", name("time reversal"), reversal < 1e-7, format!("max error after 30 frames {reversal:.2e} px")));
    }
    let train = crate::dataset::window_starts(100, Split::Train).len();
    let test = crate::dataset::window_starts(100, Split::Test).len();
    out.push(result("physics", "windows per 100-frame video", (train, test) == (77, 57), format!("{train} train, {test} test")));
    out
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand(shape, seed).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

fn gradcheck<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> CheckResult
where
    F: Fn(&mut Graph<f64>, &[Var]) -> TResult<Var>,
{
    match finite_diff_gradcheck(f, inputs, &GradCheckConfig::default()) {
        Ok(r) => result("gradcheck", name, r.passed, r.to_string()),
        Err(e) => result("gradcheck", name, false, e.to_string()),
    }
}

/// Every differentiable op, the backbone under each norm, and the composed
/// backbone plus interaction core, in f64 with step 1e-5.
pub fn gradcheck_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let (a, b) = (rand(&[3, 4], 1), rand(&[3, 4], 2));
    out.push(gradcheck("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1])));
    out.push(gradcheck("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])));
    out.push(gradcheck("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])));
    out.push(gradcheck("scale", &[a.clone()], |g, v| Ok(g.scale(v[0], -2.5))));
    out.push(gradcheck("add_scalar", &[a.clone()], |g, v| Ok(g.add_scalar(v[0], 0.3))));
    out.push(gradcheck("tanh", &[a.clone()], |g, v| Ok(g.tanh(v[0]))));
    out.push(gradcheck("relu", &[away_from_zero(&[3, 4], 3)], |g, v| Ok(g.relu(v[0]))));
    out.push(gradcheck("leaky_relu", &[away_from_zero(&[3, 4], 3)], |g, v| Ok(g.leaky_relu(v[0], 0.2))));
    out.push(gradcheck("matmul", &[rand(&[3, 5], 1), rand(&[5, 2], 2)], |g, v| g.matmul(v[0], v[1])));
    out.push(gradcheck("linear", &[rand(&[4, 6], 3), rand(&[3, 6], 4), rand(&[3], 5)], |g, v| g.linear(v[0], v[1], Some(v[2]))));
    for (stride, k, hw) in [(1, 3, (5, 6)), (2, 3, (7, 6)), (1, 1, (4, 4)), (1, 3, (3, 3))] {
        let inputs = [rand(&[2, 3, hw.0, hw.1], 10), rand(&[4, 3, k, k], 11), rand(&[4], 12)];
        out.push(gradcheck(&format!("conv2d {k}x{k} stride {stride} on {}x{}", hw.0, hw.1), &inputs, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2)
        }));
    }
    out.push(gradcheck("reshape", &[rand(&[2, 6], 1)], |g, v| g.reshape(v[0], &[3, 4])));
    out.push(gradcheck("concat", &[rand(&[2, 3, 2], 1), rand(&[2, 1, 2], 2)], |g, v| g.concat(&[v[0], v[1]], 1)));
    out.push(gradcheck("index_select0", &[rand(&[4, 3], 1)], |g, v| g.index_select0(v[0], &[2, 0, 2, 3])));
    out.push(gradcheck("index_add0", &[rand(&[5, 2, 2], 1)], |g, v| g.index_add0(v[0], &[1, 0, 1, 2, 1], 3)));
    out.push(gradcheck("expand", &[rand(&[2, 1, 3], 1)], |g, v| g.expand(v[0], &[2, 4, 3])));
    out.push(gradcheck("upsample_nearest", &[rand(&[1, 2, 2, 3], 1)], |g, v| g.upsample_nearest(v[0], 5, 6)));
    let x = rand(&[2, 3, 4], 7);
    out.push(gradcheck("sum_all", &[x.clone()], |g, v| Ok(g.sum_all(v[0]))));
    out.push(gradcheck("mean_all", &[x.clone()], |g, v| Ok(g.mean_all(v[0]))));
    out.push(gradcheck("sum_axis", &[x.clone()], |g, v| g.sum_axis(v[0], 1)));
    out.push(gradcheck("mean_axis", &[x.clone()], |g, v| g.mean_axis(v[0], 2)));
    out.push(gradcheck("max_axis", &[x], |g, v| g.max_axis(v[0], 0)));
    let x = rand(&[3, 4, 2, 3], 5);
    for groups in [1, 2, 4] {
        out.push(gradcheck(&format!("group_norm {groups}"), &[x.clone()], |g, v| g.group_norm(v[0], groups, 1e-5)));
    }
    out.push(gradcheck("batch_norm", &[x.clone()], |g, v| Ok(g.batch_norm(v[0], 1e-5)?.0)));
    out.push(gradcheck("channel_affine", &[x, rand(&[4], 1), rand(&[4], 2)], |g, v| g.channel_affine(v[0], v[1], v[2])));
    let rois = [Roi { batch: 0, x0: 1.3, y0: 0.7, x1: 9.1, y1: 6.2 }, Roi { batch: 1, x0: -2.0, y0: 3.0, x1: 5.5, y1: 11.5 }];
    let fmap = rand(&[2, 3, 3, 4], 9);
    out.push(gradcheck("roi_align", &[fmap.clone()], |g, v| g.roi_align(v[0], &rois, 3, 0.25, 2)));
    out.push(gradcheck("bilinear_sample", &[fmap], |g, v| g.bilinear_sample(v[0], &[(0, 0.3, 1.7), (1, 2.5, 2.5)])));
    out.push(gradcheck("softmax_cross_entropy", &[rand(&[2, 3, 2, 2], 4)], |g, v| {
        g.softmax_cross_entropy(v[0], &[0, 1, 2, 1, 2, 2, 0, 1])
    }));
    out.push(gradcheck("mse", &[rand(&[3, 4], 1), rand(&[3, 4], 2)], |g, v| g.mse(v[0], v[1])));
    for kind in NormKind::ALL {
        out.push(backbone_gradcheck(kind));
    }
    for kind in [NormKind::Bn, NormKind::Gn] {
        out.push(composed_gradcheck(kind));
    }
    out
}

fn trainable_inputs(params: &ParameterSet<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    let names: Vec<String> = params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect();
    let values = names.iter().map(|n| params.value(n).expect("listed").clone()).collect();
    (names, values)
}

fn backbone_gradcheck(kind: NormKind) -> CheckResult {
    let spec = BackboneSpec { in_channels: 2, stem_channels: 4, residual_blocks: 3, hourglass_depth: 1, out_channels: 4 };
    let norm = NormSpec { groups: 2, ..NormSpec::new(kind) };
    let mut params = ParameterSet::<f64>::new();
    let bb = match Backbone::new(&mut params, &mut ChaCha8Rng::seed_from_u64(21), "bb", spec, norm, (16, 16)) {
        Ok(bb) => bb,
        Err(e) => return result("gradcheck", format!("backbone {kind}"), false, e.to_string()),
    };
    let (names, values) = trainable_inputs(&params);
    let mut inputs = vec![rand(&[2, 2, 16, 16], 22)];
    inputs.extend(values);
    gradcheck(&format!("backbone {kind}"), &inputs, |g, v| {
        for (name, &var) in names.iter().zip(&v[1..]) {
            g.bind_param(name, var)?;
        }
        bb.forward(g, &params, v[0], Mode::Train)
    })
}

/// A small video of three balls, generated on the fly.
pub fn probe_video(context: ContextKind, seed: u64) -> VideoRecord {
    let cfg = GenConfig::desk(context);
    VideoRecord::generate(&cfg, Domain::Sim, seed).expect("desk scene generates")
}

pub fn tiny_dyn_config(mode: InputMode, norm: NormKind, seed: u64) -> DynConfig {
    DynConfig {
        image_hw: (8, 16),
        stem_channels: 2,
        channels: 2,
        norm: NormSpec { groups: 2, ..NormSpec::new(norm) },
        ..DynConfig::desk(mode, norm, seed)
    }
}

/// Loss of a two-step mask-input rollout, checked against every trainable
/// parameter of backbone, core and decoder.
fn composed_gradcheck(kind: NormKind) -> CheckResult {
    let name = format!("backbone + interaction core ({kind})");
    let videos = [probe_video(ContextKind::Border, 3), probe_video(ContextKind::Split, 4)];
    let cfg = tiny_dyn_config(InputMode::Mask, kind, 5);
    let model = match DynModel::<f64>::new(cfg) {
        Ok(m) => m,
        Err(e) => return result("gradcheck", name, false, e.to_string()),
    };
    let mut samples: Vec<_> = videos.iter().zip([0, 30]).filter_map(|(v, s)| sample_at(v, s, 2, MaskKind::Gt)).collect();
    for s in &mut samples {
        s.mask = downsample_mask(&s.mask, 8, 16);
    }
    let batch = match Batch::<f64>::from_samples(&samples, InputMode::Mask) {
        Ok(b) => b,
        Err(e) => return result("gradcheck", name, false, e.to_string()),
    };
    let targets = target_centres(&batch, cfg.ref_size, 2).expect("targets");
    let (names, inputs) = trainable_inputs(&model.params);
    gradcheck(&name, &inputs, |g, v| {
        for (n, &var) in names.iter().zip(v) {
            g.bind_param(n, var)?;
        }
        let r = model.rollout(g, &batch, 2, Mode::Train).map_err(into_tensor_error)?;
        loss(g, &r.centres, &targets, &r.features, &[], cfg.gamma, 0.0).map_err(into_tensor_error)
    })
}

fn into_tensor_error(e: crate::dynamics::DynError) -> bdl_tensor::TensorError {
    match e {
        crate::dynamics::DynError::Tensor(t) => t,
        other => bdl_tensor::TensorError::Invalid { op: "dynamics", msg: other.to_string() },
    }
}

/// Nearest-neighbour resize of a mask.
pub fn downsample_mask(m: &crate::render::SemanticMask, h: usize, w: usize) -> crate::render::SemanticMask {
    let border = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| m.is_border(x * m.width / w, y * m.height / h)).collect();
    crate::render::SemanticMask { width: w, height: h, border }
}

fn naive_chunk_norm(x: &[f64], len: usize, eps: f64) -> Vec<f64> {
    x.chunks(len)
        .flat_map(|c| {
            let m = c.iter().sum::<f64>() / len as f64;
            let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / len as f64;
            c.iter().map(move |x| (x - m) / (v + eps).sqrt()).collect::<Vec<_>>()
        })
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn group_norm(x: &Tensor<f64>, groups: usize, eps: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.group_norm(xv, groups, eps).expect("valid groups");
    g.value(y).data().to_vec()
}

fn norm_layer(kind: NormKind, channels: usize, x: &Tensor<f64>) -> Vec<f64> {
    let mut p = ParameterSet::new();
    let layer = Norm::new(&mut p, "n", NormSpec::new(kind), channels).expect("valid layer");
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, &p, xv, Mode::Train).expect("forward");
    g.value(y).data().to_vec()
}

/// GN with C groups is IN, GN with one group is LN, and IN ignores a
/// per-plane affine map of its input; `n` random inputs each.
pub fn norm_suite(n: u64) -> Vec<CheckResult> {
    let (c, h, w) = (6, 3, 5);
    let (mut gn_in, mut gn_ln, mut inv_exact, mut inv_eps) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..n {
        let x = Tensor::uniform(&[2, c, h, w], 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let inst = naive_chunk_norm(x.data(), h * w, 1e-5);
        let layer = naive_chunk_norm(x.data(), c * h * w, 1e-5);
        gn_in = gn_in.max(max_diff(&group_norm(&x, c, 1e-5), &inst)).max(max_diff(&norm_layer(NormKind::In, c, &x), &inst));
        gn_ln = gn_ln.max(max_diff(&group_norm(&x, 1, 1e-5), &layer)).max(max_diff(&norm_layer(NormKind::Ln, c, &x), &layer));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xaff1);
        let scale = 0.1 + 9.9 * rand::Rng::random::<f64>(&mut rng);
        let mut y = x.clone();
        for plane in y.data_mut().chunks_mut(h * w) {
            let shift = rand::Rng::random_range(&mut rng, -50.0..50.0);
            plane.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        inv_exact = inv_exact.max(max_diff(&group_norm(&x, c, 0.0), &group_norm(&y, c, 0.0)));
        inv_eps = inv_eps.max(max_diff(&group_norm(&x, c, 1e-5 / (scale * scale)), &group_norm(&y, c, 1e-5)));
    }
    vec![
        result("norms", format!("GN(C) = IN over {n} inputs"), gn_in < 1e-5, format!("max diff {gn_in:.2e}")),
        result("norms", format!("GN(1) = LN over {n} inputs"), gn_ln < 1e-5, format!("max diff {gn_ln:.2e}")),
        result(
            "norms",
            format!("IN shift/scale invariance over {n} inputs"),
            inv_exact < 1e-5 && inv_eps < 1e-5,
            format!("max diff {inv_exact:.2e} without floor, {inv_eps:.2e} with rescaled floor"),
        ),
    ]
}

/// Raw normalized centres of a rollout, `[step][row] (x, y)`.
pub fn rollout_centres(model: &DynModel<f64>, samples: &[crate::dataset::VideoSample], horizon: usize) -> Vec<Vec<(f64, f64)>> {
    let batch = Batch::<f64>::from_samples(samples, model.config.input_mode).expect("consistent samples");
    let mut g = Graph::new();
    let r = model.rollout(&mut g, &batch, horizon, Mode::Eval).expect("rollout");
    r.centres.iter().map(|&c| g.value(c).data().chunks(2).map(|p| (p[0], p[1])).collect()).collect()
}

fn permute_boxes(frames: &[Vec<BBox>], perm: &[usize]) -> Vec<Vec<BBox>> {
    frames.iter().map(|f| perm.iter().map(|&i| f[i]).collect()).collect()
}

/// Rollouts commute with ball permutations, and with `f_R` zeroed each ball
/// evolves as if alone.
pub fn structure_suite() -> Vec<CheckResult> {
    let video = probe_video(ContextKind::Split, 11);
    let mut out = Vec::new();
    for mode in [InputMode::Rgb, InputMode::Mask] {
        let cfg = DynConfig { stem_channels: 4, channels: 4, ..DynConfig::desk(mode, NormKind::Bn, 2) };
        let mut model = DynModel::<f64>::new(cfg).expect("desk config");
        let samples: Vec<_> = [0, 17].iter().filter_map(|&s| sample_at(&video, s, TEST_HORIZON, MaskKind::Gt)).collect();
        let base = rollout_centres(&model, &samples, TRAIN_HORIZON);
        let mut worst = 0usize;
        for perm in [[1, 0, 2], [2, 0, 1], [2, 1, 0]] {
            let permuted: Vec<_> = samples
                .iter()
                .map(|s| crate::dataset::VideoSample { ref_boxes: permute_boxes(&s.ref_boxes, &perm), ..s.clone() })
                .collect();
            let got = rollout_centres(&model, &permuted, TRAIN_HORIZON);
            for (b, g) in base.iter().zip(&got) {
                for s in 0..samples.len() {
                    for (k, &i) in perm.iter().enumerate() {
                        worst += usize::from(g[s * 3 + k] != b[s * 3 + i]);
                    }
                }
            }
        }
        out.push(result(
            "structure",
            format!("permutation equivariance ({mode:?} input)"),
            worst == 0,
            format!("{worst} of {} permuted centres differ bitwise", 3 * 2 * 3 * TRAIN_HORIZON),
        ));
        if mode == InputMode::Mask {
            let names: Vec<String> = model.params.names().iter().filter(|n| n.starts_with(F_R_PREFIX)).cloned().collect();
            for n in &names {
                let z = model.params.value(n).expect("listed").map(|_| 0.0);
                model.params.set_value(n, z).expect("same shape");
            }
            let joint = rollout_centres(&model, &samples[..1], TRAIN_HORIZON);
            let mut mismatches = 0usize;
            for ball in 0..3 {
                let alone = crate::dataset::VideoSample {
                    ref_boxes: permute_boxes(&samples[0].ref_boxes, &[ball]),
                    ..samples[0].clone()
                };
                let solo = rollout_centres(&model, &[alone], TRAIN_HORIZON);
                mismatches += joint.iter().zip(&solo).filter(|(j, s)| j[ball] != s[0]).count();
            }
            out.push(result(
                "structure",
                "zeroed f_R decouples balls",
                mismatches == 0 && !names.is_empty(),
                format!("{} f_R tensors zeroed, {mismatches} of {} steps differ from single-ball rollouts", names.len(), 3 * TRAIN_HORIZON),
            ));
        }
    }
    out
}

pub fn run_all() -> Vec<CheckResult> {
    let mut out = physics_suite(50);
    out.extend(gradcheck_suite());
    out.extend(norm_suite(100));
    out.extend(structure_suite());
    out
}
