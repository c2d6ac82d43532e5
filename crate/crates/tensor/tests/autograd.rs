use bdl_tensor::{Graph, ParameterSet, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn relu_and_mse_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[-1.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    let m = g.mse(x, x).unwrap();
    assert_eq!(g.value(m).item(), 0.0);
}

#[test]
fn cross_entropy_matches_closed_form_and_falls_with_margin() {
    let ce = |z: f64| {
        let mut g = Graph::new();
        let l = g.constant(t(&[1, 3], &[z, 0.5, -0.25]));
        let loss = g.softmax_cross_entropy(l, &[0]).unwrap();
        g.value(loss).item()
    };
    for z in [0.0f64, 1.0, 3.0] {
        let want = -(z.exp() / (z.exp() + 0.5f64.exp() + (-0.25f64).exp())).ln();
        assert!((ce(z) - want).abs() < 1e-12);
    }
    assert!(ce(0.0) > ce(1.0) && ce(1.0) > ce(3.0));
}

#[test]
fn sum_of_squares_gradient_is_two_theta() {
    let mut params = ParameterSet::<f64>::new();
    params.add("theta", t(&[3], &[0.5, -2.0, 3.0]), true).unwrap();
    let mut g = Graph::new();
    let th = g.param(&params, "theta").unwrap();
    let sq = g.mul(th, th).unwrap();
    let loss = g.sum_all(sq);
    let grads = g.backward(loss).unwrap();
    params.accumulate(&g, &grads);
    assert_eq!(params.get("theta").unwrap().grad.as_ref().unwrap().data(), &[1.0, -4.0, 6.0]);
}

#[test]
fn detached_and_constant_leaves_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.variable(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let d = g.detach(x);
    let a = g.mul(x, c).unwrap();
    let b = g.mul(a, d).unwrap();
    let loss = g.sum_all(b);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(d).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 8.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.variable(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(s)) if s == vec![2]));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err();
    assert!(err.to_string().starts_with("add:"), "{err}");
    let err = g.matmul(a, a).unwrap_err();
    assert!(err.to_string().contains("matmul") && err.to_string().contains("[2, 3]"));
}

#[test]
fn unreached_bound_param_gets_zero_gradient() {
    let mut params = ParameterSet::<f64>::new();
    params.add("used", Tensor::ones(&[2]), true).unwrap();
    params.add("unused", Tensor::ones(&[2]), true).unwrap();
    let mut g = Graph::new();
    let u = g.param(&params, "used").unwrap();
    g.param(&params, "unused").unwrap();
    let loss = g.sum_all(u);
    let grads = g.backward(loss).unwrap();
    params.accumulate(&g, &grads);
    assert_eq!(params.get("unused").unwrap().grad.as_ref().unwrap().data(), &[0.0, 0.0]);
}

fn conv_loss_grads(x: &Tensor<f64>, w: &Tensor<f64>, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let wv = g.variable(w.clone());
    let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
    let s = g.sum_all(y);
    let loss = g.scale(s, alpha);
    let grads = g.backward(loss).unwrap();
    (grads.get(xv).unwrap().data().to_vec(), grads.get(wv).unwrap().data().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradients_are_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[2, 3, 5, 4], 1.0, &mut rng);
        let w = Tensor::uniform(&[2, 3, 3, 3], 1.0, &mut rng);
        let a = conv_loss_grads(&x, &w, 1.0);
        let b = conv_loss_grads(&x, &w, 1.0);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn scaling_a_linear_loss_scales_gradients_exactly(seed in any::<u64>(), k in -8i32..8) {
        // Powers of two keep the scaling exact in floating point.
        let alpha = 2f64.powi(k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[1, 2, 4, 4], 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
        let (gx1, gw1) = conv_loss_grads(&x, &w, 1.0);
        let (gx, gw) = conv_loss_grads(&x, &w, alpha);
        for (a, b) in gx1.iter().zip(&gx).chain(gw1.iter().zip(&gw)) {
            prop_assert_eq!(a * alpha, *b);
        }
    }
}
