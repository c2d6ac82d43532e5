//! Central-difference gradient checking in f64.
//!
//! The function under test may return any shape; it is reduced to a scalar by
//! a fixed random projection so every output element contributes to the
//! checked vector-Jacobian product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Denominator floor: errors on gradients smaller than this are judged
    /// against the floor instead of the gradient itself.
    pub floor: f64,
    /// Seed for the output projection.
    pub seed: u64,
    /// Largest fraction of entries that may need a kink re-probe.
    pub max_kink_fraction: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, rel_tol: 1e-4, floor: 1e-4, seed: 0x5eed, max_kink_fraction: 0.01 }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries re-probed with a tenth of the step because the first probe
    /// straddled a kink (relu at zero, a max switching argument).
    pub kinks: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} entries ({} kink re-probes), max rel {:.3e}, max abs {:.3e}, {}",
            self.checked,
            self.kinks,
            self.max_rel_error,
            self.max_abs_error,
            if self.passed { "pass" } else { "FAIL" }
        )?;
        if let Some((i, j, a, n)) = self.worst {
            write!(f, " (worst input {i}[{j}]: analytic {a:.6e} numeric {n:.6e})")?;
        }
        Ok(())
    }
}

/// Compare reverse-mode gradients of `f` against central differences for
/// every element of every input.
pub fn finite_diff_gradcheck<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let projection = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let shape = g.shape(out).to_vec();
        Tensor::<f64>::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
    };
    let objective = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let out = f(g, vars)?;
        let w = g.constant(projection.clone());
        let prod = g.mul(out, w)?;
        Ok(g.sum_all(prod))
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = objective(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = objective(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let center = g.value(loss).item();

    let mut report = GradCheckReport { checked: 0, kinks: 0, max_rel_error: 0.0, max_abs_error: 0.0, worst: None, passed: true };
    let mut probe = inputs.to_vec();
    let central = |probe: &mut Vec<Tensor<f64>>, i: usize, j: usize, h: f64| -> Result<(f64, f64, f64)> {
        let x0 = probe[i].data()[j];
        probe[i].data_mut()[j] = x0 + h;
        let up = eval(probe)?;
        probe[i].data_mut()[j] = x0 - h;
        let down = eval(probe)?;
        probe[i].data_mut()[j] = x0;
        Ok(((up - down) / (2.0 * h), (up - center) / h, (center - down) / h))
    };
    let rel_err = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let a = analytic.data()[j];
            let (mut numeric, right, left) = central(&mut probe, i, j, cfg.eps)?;
            // A failing entry whose one-sided slopes disagree by at least the
            // error is straddling a kink; re-probe with a smaller step.
            if rel_err(a, numeric) >= cfg.rel_tol && (right - left).abs() >= (a - numeric).abs() {
                report.kinks += 1;
                numeric = central(&mut probe, i, j, cfg.eps / 10.0)?.0;
            }
            let abs = (a - numeric).abs();
            let rel = rel_err(a, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    report.passed =
        report.max_rel_error < cfg.rel_tol && (report.kinks as f64) <= cfg.max_kink_fraction * report.checked as f64;
    Ok(report)
}
