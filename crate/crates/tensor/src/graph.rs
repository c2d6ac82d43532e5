//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order. Creation order is a
//! valid topological order, so [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients in a fixed order: identical graphs and values
//! give bitwise-identical gradients.

use std::collections::HashMap;

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::kernels::conv::{self, ConvCache, ConvGeom, Unrolled};
use std::sync::Arc;
use crate::kernels::norm;
use crate::kernels::roi::{self, Roi};
use crate::optim::ParameterSet;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cache: ConvCache<T> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    IndexSelect0 { x: Var, idx: Vec<usize> },
    IndexAdd0 { x: Var, idx: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    Expand { x: Var },
    GroupNorm { x: Var, groups: usize, rstd: Vec<T> },
    BatchNorm { x: Var, rstd: Vec<T> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    UpsampleNearest { x: Var },
    RoiAlign { x: Var, rois: Vec<Roi>, k: usize, scale: f64, sampling: usize },
    BilinearSample { x: Var, points: Vec<(usize, f64, f64)> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
    buffer_updates: Vec<(String, Tensor<T>)>,
    unrolled: HashMap<(Var, ConvGeom), Arc<Unrolled<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return shape_err(op, &[a, b]);
    }
    Ok(())
}

/// `(outer, len, inner)` view of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::Invalid { op, msg: format!("expected NCHW input, got {shape:?}") }),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), buffer_updates: Vec::new(), unrolled: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// Leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &ParameterSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = params.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Bind an existing node under a parameter name, so later [`Graph::param`]
    /// calls resolve to it instead of reading the parameter set.
    pub fn bind_param(&mut self, name: &str, v: Var) -> Result<()> {
        if self.bound.contains_key(name) {
            return Err(TensorError::Invalid { op: "bind_param", msg: format!("`{name}` is already bound") });
        }
        self.bound.insert(name.to_string(), v);
        Ok(())
    }

    /// Parameters bound to this graph, sorted by name.
    pub fn bound_params(&self) -> Vec<(&str, Var)> {
        let mut out: Vec<_> = self.bound.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    /// Queue a non-trainable buffer overwrite (e.g. running statistics).
    pub fn update_buffer(&mut self, name: &str, value: Tensor<T>) {
        self.buffer_updates.push((name.to_string(), value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x, c), self.rg(&[x]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddScalar(x), self.rg(&[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push(v, Op::Relu(x), self.rg(&[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        let v = self.value(x).map(|a| if a > T::zero() { a } else { a * s });
        self.push(v, Op::LeakyRelu(x, s), self.rg(&[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.push(v, Op::Tanh(x), self.rg(&[x]))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `(m, k) x (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return shape_err("matmul", &[sa, sb]),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, n, k, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let v = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(v, Op::Matmul(a, b), self.rg(&[a, b])))
    }

    /// `x (m, in)`, `w (out, in)`, `b (out)`: `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (m, inp, out) = match (&sx[..], &sw[..]) {
            ([m, i], [o, i2]) if i == i2 => (*m, *i, *o),
            _ => return shape_err("linear", &[&sx, &sw]),
        };
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return shape_err("linear", &[&sx, &sw, self.shape(b)]);
            }
        }
        let mut y = vec![T::zero(); m * out];
        T::gemm(false, true, m, out, inp, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), &mut y);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (v, &bv) in row.iter_mut().zip(bd) {
                    *v = *v + bv;
                }
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let v = Tensor::from_vec(&[m, out], y)?;
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    /// Cross-correlation of NCHW `x` with `w (O, C, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, c, h, wd) = nchw("conv2d", &sx)?;
        let (o, kh, kw) = match sw[..] {
            [o, c2, kh, kw] if c2 == c => (o, kh, kw),
            _ => return shape_err("conv2d", &[&sx, &sw]),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err("conv2d", &[&sx, &sw, self.shape(b)]);
            }
        }
        let geom = ConvGeom::new(n, c, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| TensorError::Shape { op: "conv2d", shapes: vec![sx.clone(), sw.clone()] })?;
        let (y, cache) = if geom.prefers_dense() {
            // Values are immutable within a graph, so one expansion serves every use of `w`.
            let un = self
                .unrolled
                .entry((w, ConvGeom { n: 0, ..geom }))
                .or_insert_with(|| Arc::new(conv::unroll(self.nodes[w.0].value.data(), &geom, o)))
                .clone();
            conv::conv2d_dense_forward(self.value(x).data(), un, b.map(|b| self.value(b).data()), &geom, o)
        } else {
            conv::conv2d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom, o)
        };
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let v = Tensor::from_vec(&[n, o, geom.oh, geom.ow], y)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, geom, cache }, rg))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), self.rg(&[x])))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or(TensorError::Invalid { op: "concat", msg: "no inputs".into() })?;
        if axis >= first.len() {
            return shape_err("concat", &[&first]);
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err("concat", &[&first, s]);
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Gather rows of the leading axis.
    pub fn index_select0(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let rows = *s.first().ok_or(TensorError::Invalid { op: "index_select0", msg: "scalar input".into() })?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid { op: "index_select0", msg: format!("index {bad} >= {rows}") });
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(v, Op::IndexSelect0 { x, idx: idx.to_vec() }, self.rg(&[x])))
    }

    /// Scatter-add rows: `out[idx[r]] += x[r]`, with `rows` output rows.
    pub fn index_add0(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.first() != Some(&idx.len()) || idx.iter().any(|&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "index_add0",
                msg: format!("{} indices for input {s:?} into {rows} rows", idx.len()),
            });
        }
        let inner: usize = s[1..].iter().product();
        let mut data = vec![T::zero(); rows * inner];
        let src = self.value(x).data();
        for (r, &i) in idx.iter().enumerate() {
            for (d, &v) in data[i * inner..(i + 1) * inner].iter_mut().zip(&src[r * inner..(r + 1) * inner]) {
                *d = *d + v;
            }
        }
        let mut shape = s;
        shape[0] = rows;
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(v, Op::IndexAdd0 { x, idx: idx.to_vec() }, self.rg(&[x])))
    }

    /// Broadcast singleton dimensions up to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return shape_err("expand", &[&s, shape]);
        }
        let src = self.value(x).data();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| src[broadcast_index(i, shape, &s)]).collect();
        let v = Tensor::from_vec(shape, data)?;
        Ok(self.push(v, Op::Expand { x }, self.rg(&[x])))
    }

    /// Nearest-neighbour resize of the two trailing axes of NCHW input.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("upsample_nearest", self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return shape_err("upsample_nearest", &[self.shape(x), &[out_h, out_w]]);
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * out_h * out_w);
        for plane in src.chunks(h * w) {
            for oy in 0..out_h {
                let iy = oy * h / out_h;
                for ox in 0..out_w {
                    data.push(plane[iy * w + ox * w / out_w]);
                }
            }
        }
        let v = Tensor::from_vec(&[n, c, out_h, out_w], data)?;
        Ok(self.push(v, Op::UpsampleNearest { x }, self.rg(&[x])))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x), self.rg(&[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::from_usize(t.numel().max(1)).unwrap());
        self.push(v, Op::MeanAll(x), self.rg(&[x]))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return shape_err("sum_axis", &[&s]);
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(v, Op::SumAxis { x, axis }, self.rg(&[x])))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or_else(|| TensorError::Shape {
            op: "mean_axis",
            shapes: vec![self.shape(x).to_vec()],
        })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Maximum over `axis`, removing it; ties resolve to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return shape_err("max_axis", &[&s]);
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for l in 1..len {
                    if src[(o * len + l) * inner + i] > src[(o * len + best) * inner + i] {
                        best = l;
                    }
                }
                data.push(src[(o * len + best) * inner + i]);
                argmax.push(best);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(v, Op::MaxAxis { x, axis, argmax }, self.rg(&[x])))
    }

    // ---------------------------------------------------------------- normalization

    /// Pre-affine group normalization of `(N, C, ...)` input.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || groups == 0 || s[1] % groups != 0 {
            return Err(TensorError::Invalid {
                op: "group_norm",
                msg: format!("{groups} groups do not divide the channels of {s:?}"),
            });
        }
        let sp: usize = s[2..].iter().product();
        let (y, rstd) = norm::group_norm_forward(self.value(x).data(), s[0], s[1], sp, groups, eps);
        let v = Tensor::from_vec(&s, y)?;
        Ok(self.push(v, Op::GroupNorm { x, groups, rstd }, self.rg(&[x])))
    }

    /// Pre-affine batch normalization with batch statistics per channel.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return shape_err("batch_norm", &[&s]);
        }
        let sp: usize = s[2..].iter().product();
        let (y, mean, var, rstd) = norm::batch_norm_forward(self.value(x).data(), s[0], s[1], sp, eps);
        let v = Tensor::from_vec(&s, y)?;
        let out = self.push(v, Op::BatchNorm { x, rstd }, self.rg(&[x]));
        Ok((out, BatchStats { mean, var, count: s[0] * sp }))
    }

    /// Per-channel `x * scale[c] + shift[c]` on `(N, C, ...)` input.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(scale) != [s[1]] || self.shape(shift) != [s[1]] {
            return shape_err("channel_affine", &[&s, self.shape(scale), self.shape(shift)]);
        }
        let sp: usize = s[2..].iter().product();
        let (src, g, b) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut data = Vec::with_capacity(src.len());
        for (k, plane) in src.chunks(sp).enumerate() {
            let c = k % s[1];
            data.extend(plane.iter().map(|&v| v * g[c] + b[c]));
        }
        let rg = self.rg(&[x, scale, shift]);
        let v = Tensor::from_vec(&s, data)?;
        Ok(self.push(v, Op::ChannelAffine { x, scale, shift }, rg))
    }

    // ---------------------------------------------------------------- sampling

    /// RoI align: `(R, C, k, k)` features from NCHW `x`.
    pub fn roi_align(&mut self, x: Var, rois: &[Roi], k: usize, scale: f64, sampling: usize) -> Result<Var> {
        let dims = nchw("roi_align", self.shape(x))?;
        if k == 0 || sampling == 0 {
            return Err(TensorError::Invalid { op: "roi_align", msg: "output size and sampling must be positive".into() });
        }
        for r in rois {
            if r.batch >= dims.0 {
                return Err(TensorError::Invalid { op: "roi_align", msg: format!("batch index {} >= {}", r.batch, dims.0) });
            }
            if !(r.x1 > r.x0 && r.y1 > r.y0) || ![r.x0, r.y0, r.x1, r.y1].iter().all(|v| v.is_finite()) {
                return Err(TensorError::Invalid { op: "roi_align", msg: format!("degenerate box {r:?}") });
            }
        }
        let y = roi::roi_align_forward(self.value(x).data(), dims, rois, k, scale, sampling);
        let v = Tensor::from_vec(&[rois.len(), dims.1, k, k], y)?;
        let op = Op::RoiAlign { x, rois: rois.to_vec(), k, scale, sampling };
        Ok(self.push(v, op, self.rg(&[x])))
    }

    /// Bilinear samples `(P, C)` at feature coordinates `(batch, y, x)`.
    pub fn bilinear_sample(&mut self, x: Var, points: &[(usize, f64, f64)]) -> Result<Var> {
        let (n, c, h, w) = nchw("bilinear_sample", self.shape(x))?;
        if let Some(p) = points.iter().find(|p| p.0 >= n) {
            return Err(TensorError::Invalid { op: "bilinear_sample", msg: format!("batch index {} >= {n}", p.0) });
        }
        let src = self.value(x).data();
        let mut data = vec![T::zero(); points.len() * c];
        for (pi, &(b, py, px)) in points.iter().enumerate() {
            if let Some(taps) = roi::bilinear_taps(h, w, py, px) {
                for ci in 0..c {
                    let plane = &src[(b * c + ci) * h * w..][..h * w];
                    let acc: f64 = taps.iter().map(|&(i, wt)| plane[i].as_f64() * wt).sum();
                    data[pi * c + ci] = T::from_f64_lossy(acc);
                }
            }
        }
        let v = Tensor::from_vec(&[points.len(), c], data)?;
        Ok(self.push(v, Op::BilinearSample { x, points: points.to_vec() }, self.rg(&[x])))
    }

    // ---------------------------------------------------------------- losses

    /// Mean softmax cross-entropy. `logits` is `(N, K, ...)`, classes on axis 1;
    /// `targets` holds one class per `(n, spatial)` position in row-major order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() < 2 {
            return shape_err("softmax_cross_entropy", &[&s]);
        }
        let (n, k) = (s[0], s[1]);
        let sp: usize = s[2..].iter().product();
        if targets.len() != n * sp || targets.iter().any(|&t| t >= k) {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("{} targets for logits {s:?}", targets.len()),
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = 0.0f64;
        for ni in 0..n {
            for p in 0..sp {
                let at = |c: usize| (ni * k + c) * sp + p;
                let mx = (0..k).map(|c| src[at(c)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..k).map(|c| (src[at(c)] - mx).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = (src[at(c)] - mx).exp() / z;
                }
                let t = targets[ni * sp + p];
                total += (z.ln() - (src[at(t)] - mx)).as_f64();
            }
        }
        let v = Tensor::scalar(T::from_f64_lossy(total / (n * sp) as f64));
        let op = Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(v, op, self.rg(&[logits])))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.shape(a), self.shape(b))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let s: T = da.iter().zip(db).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(s / T::from_usize(da.len().max(1)).unwrap());
        Ok(self.push(v, Op::Mse(a, b), self.rg(&[a, b])))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (var, dg) in self.input_grads(node, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<T>| Tensor::from_vec(val(v).shape(), data).expect("gradient shape");
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)),
                (*b, g.zip_map(val(*a), |x, y| x * y)),
            ],
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |d, a| if a > T::zero() { d } else { T::zero() }))],
            Op::LeakyRelu(x, s) => vec![(*x, g.zip_map(val(*x), |d, a| if a > T::zero() { d } else { d * *s }))],
            Op::Tanh(x) => vec![(*x, g.zip_map(&node.value, |d, y| d * (T::one() - y * y)))],
            Op::Matmul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let mut out = vec![];
                if rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(false, true, m, k, n, T::one(), g.data(), val(*b).data(), T::zero(), &mut da);
                    out.push((*a, like(*a, da)));
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(true, false, k, n, m, T::one(), val(*a).data(), g.data(), T::zero(), &mut db);
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let (m, inp) = (val(*x).shape()[0], val(*x).shape()[1]);
                let o = val(*w).shape()[0];
                let mut out = vec![];
                if rg(*x) {
                    let mut dx = vec![T::zero(); m * inp];
                    T::gemm(false, false, m, inp, o, T::one(), g.data(), val(*w).data(), T::zero(), &mut dx);
                    out.push((*x, like(*x, dx)));
                }
                if rg(*w) {
                    let mut dw = vec![T::zero(); o * inp];
                    T::gemm(true, false, o, inp, m, T::one(), g.data(), val(*x).data(), T::zero(), &mut dw);
                    out.push((*w, like(*w, dw)));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::Conv2d { x, w, b, geom, cache } => {
                let o = val(*w).shape()[0];
                let (dx, dw, db) = conv::conv2d_backward(g.data(), val(*x).data(), val(*w).data(), cache, geom, o, rg(*x));
                let mut out = vec![(*w, like(*w, dw))];
                if let Some(dx) = dx {
                    out.push((*x, like(*x, dx)));
                }
                if let Some(b) = b {
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::Reshape(x) => vec![(*x, like(*x, g.data().to_vec()))],
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                let mut out = vec![];
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if rg(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        out.push((p, like(p, d)));
                    }
                    offset += len;
                }
                out
            }
            Op::IndexSelect0 { x, idx } => {
                let inner: usize = val(*x).shape()[1..].iter().product();
                let mut d = vec![T::zero(); val(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (a, &b) in d[i * inner..(i + 1) * inner].iter_mut().zip(&g.data()[r * inner..(r + 1) * inner]) {
                        *a = *a + b;
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::IndexAdd0 { x, idx } => {
                let inner: usize = val(*x).shape()[1..].iter().product();
                let mut d = Vec::with_capacity(val(*x).numel());
                for &i in idx {
                    d.extend_from_slice(&g.data()[i * inner..(i + 1) * inner]);
                }
                vec![(*x, like(*x, d))]
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::MeanAll(x) => {
                let n = T::from_usize(val(*x).numel().max(1)).unwrap();
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(val(*x).shape(), *axis);
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        d.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, len, inner) = axis_split(val(*x).shape(), *axis);
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let a = argmax[o * inner + i];
                        d[(o * len + a) * inner + i] = g.data()[o * inner + i];
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::Expand { x } => {
                let (to, from) = (node.value.shape(), val(*x).shape());
                let mut d = vec![T::zero(); val(*x).numel()];
                for (i, &gv) in g.data().iter().enumerate() {
                    let j = broadcast_index(i, to, from);
                    d[j] = d[j] + gv;
                }
                vec![(*x, like(*x, d))]
            }
            Op::GroupNorm { x, groups, rstd } => {
                let s = val(*x).shape();
                let seg = s[1] / groups * s[2..].iter().product::<usize>();
                let d = norm::group_norm_backward(g.data(), node.value.data(), rstd, seg);
                vec![(*x, like(*x, d))]
            }
            Op::BatchNorm { x, rstd } => {
                let s = val(*x).shape();
                let sp = s[2..].iter().product();
                let d = norm::batch_norm_backward(g.data(), node.value.data(), rstd, s[0], s[1], sp);
                vec![(*x, like(*x, d))]
            }
            Op::ChannelAffine { x, scale, shift } => {
                let s = val(*x).shape();
                let (c, sp) = (s[1], s[2..].iter().product::<usize>());
                let (xs, gs) = (val(*x).data(), val(*scale).data());
                let mut dx = Vec::with_capacity(xs.len());
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (k, (gp, xp)) in g.data().chunks(sp).zip(xs.chunks(sp)).enumerate() {
                    let ci = k % c;
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        dx.push(gv * gs[ci]);
                        dg[ci] = dg[ci] + gv * xv;
                        db[ci] = db[ci] + gv;
                    }
                }
                vec![(*x, like(*x, dx)), (*scale, like(*scale, dg)), (*shift, like(*shift, db))]
            }
            Op::UpsampleNearest { x } => {
                let s = val(*x).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let mut d = vec![T::zero(); val(*x).numel()];
                for (plane, gp) in d.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for oy in 0..oh {
                        let iy = oy * h / oh;
                        for ox in 0..ow {
                            let j = iy * w + ox * w / ow;
                            plane[j] = plane[j] + gp[oy * ow + ox];
                        }
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::RoiAlign { x, rois, k, scale, sampling } => {
                let s = val(*x).shape();
                let dims = (s[0], s[1], s[2], s[3]);
                let d = roi::roi_align_backward(g.data(), dims, rois, *k, *scale, *sampling);
                vec![(*x, like(*x, d))]
            }
            Op::BilinearSample { x, points } => {
                let s = val(*x).shape();
                let (c, h, w) = (s[1], s[2], s[3]);
                let mut d = vec![T::zero(); val(*x).numel()];
                for (pi, &(b, py, px)) in points.iter().enumerate() {
                    if let Some(taps) = roi::bilinear_taps(h, w, py, px) {
                        for ci in 0..c {
                            let gv = g.data()[pi * c + ci].as_f64();
                            let plane = &mut d[(b * c + ci) * h * w..][..h * w];
                            for &(i, wt) in &taps {
                                plane[i] = plane[i] + T::from_f64_lossy(gv * wt);
                            }
                        }
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let s = val(*logits).shape();
                let (k, sp) = (s[1], s[2..].iter().product::<usize>());
                let m = T::from_usize(targets.len()).unwrap();
                let scale = g.item() / m;
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (j, &t) in targets.iter().enumerate() {
                    let (ni, p) = (j / sp, j % sp);
                    let at = (ni * k + t) * sp + p;
                    d[at] = d[at] - scale;
                }
                vec![(*logits, like(*logits, d))]
            }
            Op::Mse(a, b) => {
                let n = T::from_usize(val(*a).numel().max(1)).unwrap();
                let two = T::from_f64_lossy(2.0) * g.item() / n;
                let da = val(*a).zip_map(val(*b), |x, y| two * (x - y));
                let db = da.map(|v| -v);
                vec![(*a, da), (*b, db)]
            }
        }
    }
}

/// Flat index into `from` for flat index `i` of the broadcast shape `to`.
fn broadcast_index(mut i: usize, to: &[usize], from: &[usize]) -> usize {
    let mut j = 0;
    let mut stride = 1;
    for d in (0..to.len()).rev() {
        let coord = i % to[d];
        i /= to[d];
        if from[d] != 1 {
            j += coord * stride;
        }
        stride *= from[d];
    }
    j
}

