//! Named parameters, Adam, and the cosine learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
    pub grad: Option<Tensor<T>>,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Ordered collection of named tensors plus Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<T> {
    names: Vec<String>,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * theta` (L2 form).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), params: Vec::new(), index: HashMap::new(), step: 0 }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid { op: "ParameterSet::add", msg: format!("duplicate parameter `{name}`") });
        }
        let shape = value.shape().to_vec();
        self.index.insert(name.to_string(), self.params.len());
        self.names.push(name.to_string());
        self.params.push(Param { value, trainable, grad: None, m: Tensor::zeros(&shape), v: Tensor::zeros(&shape) });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|p| &p.value).ok_or_else(|| TensorError::UnknownParam(name.into()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.into()))?;
        if p.value.shape() != value.shape() {
            return Err(TensorError::Shape { op: "set_value", shapes: vec![p.value.shape().to_vec(), value.shape().to_vec()] });
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn numel_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add the gradients of every trainable parameter bound into `graph`.
    /// A bound parameter the loss does not reach receives a zero gradient.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (name, var) in graph.bound_params() {
            let Some(&i) = self.index.get(name) else { continue };
            let p = &mut self.params[i];
            if !p.trainable {
                continue;
            }
            let g = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            match &mut p.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
    }

    /// Overwrite buffers queued by `graph` (e.g. running statistics).
    pub fn apply_buffer_updates(&mut self, graph: &mut Graph<T>) -> Result<()> {
        for (name, value) in graph.take_buffer_updates() {
            self.set_value(&name, value)?;
        }
        Ok(())
    }

    /// Euclidean norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every populated gradient.
    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::from_f64_lossy(factor);
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            for v in g.data_mut() {
                *v = *v * f;
            }
        }
    }

    /// One Adam update with bias correction; clears gradients afterwards.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(TensorError::MissingGradient(name.to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let wd = T::from_f64_lossy(cfg.weight_decay);
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(cfg.eps);
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let g = p.grad.take().expect("checked above");
            let theta = p.value.data_mut();
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for i in 0..theta.len() {
                let gi = g.data()[i] + wd * theta[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                theta[i] = theta[i] - step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` at step 0 to zero at `total_steps`.
/// Steps beyond the end clamp to zero.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let frac = step as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
