//! Statistics kernels shared by batch and group normalization.
//!
//! Both reduce to "normalize each segment of a strided view"; the segment
//! layouts differ. Outputs are pre-affine.

use crate::element::Element;

/// Group normalization over `(n, c, s)` with `groups` dividing `c`.
/// Returns `(y, rstd)` with one `rstd` per `(n, group)`.
pub fn group_norm_forward<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let seg = c / groups * s;
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(n * groups);
    for (k, chunk) in x.chunks(seg).enumerate() {
        let (mean, var) = mean_var(chunk.iter().copied());
        let r = T::one() / (var + T::from_f64_lossy(eps)).sqrt();
        for (o, &v) in y[k * seg..(k + 1) * seg].iter_mut().zip(chunk) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (y, rstd)
}

pub fn group_norm_backward<T: Element>(dy: &[T], y: &[T], rstd: &[T], seg: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    for (k, &r) in rstd.iter().enumerate() {
        let range = k * seg..(k + 1) * seg;
        normalize_grad(&dy[range.clone()], &y[range.clone()], r, &mut dx[range]);
    }
    dx
}

/// Batch normalization over `(n, c, s)`, statistics per channel.
/// Returns `(y, mean, biased var, rstd)` per channel.
pub fn batch_norm_forward<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    s: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let (mut means, mut vars, mut rstds) = (Vec::new(), Vec::new(), Vec::new());
    for ci in 0..c {
        let iter = (0..n).flat_map(|ni| x[(ni * c + ci) * s..][..s].iter().copied());
        let (mean, var) = mean_var(iter);
        let r = T::one() / (var + T::from_f64_lossy(eps)).sqrt();
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for i in base..base + s {
                y[i] = (x[i] - mean) * r;
            }
        }
        means.push(mean);
        vars.push(var);
        rstds.push(r);
    }
    (y, means, vars, rstds)
}

pub fn batch_norm_backward<T: Element>(
    dy: &[T],
    y: &[T],
    rstd: &[T],
    n: usize,
    c: usize,
    s: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    let m = T::from_usize(n * s).unwrap();
    for (ci, &r) in rstd.iter().enumerate() {
        let (mut sum_dy, mut sum_dyy) = (T::zero(), T::zero());
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for i in base..base + s {
                sum_dy = sum_dy + dy[i];
                sum_dyy = sum_dyy + dy[i] * y[i];
            }
        }
        let (mdy, mdyy) = (sum_dy / m, sum_dyy / m);
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for i in base..base + s {
                dx[i] = r * (dy[i] - mdy - y[i] * mdyy);
            }
        }
    }
    dx
}

fn normalize_grad<T: Element>(dy: &[T], y: &[T], rstd: T, dx: &mut [T]) {
    let m = T::from_usize(dy.len()).unwrap();
    let mdy = dy.iter().copied().sum::<T>() / m;
    let mdyy = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / m;
    for ((o, &g), &yy) in dx.iter_mut().zip(dy).zip(y) {
        *o = rstd * (g - mdy - yy * mdyy);
    }
}

/// Two-pass mean and biased variance.
fn mean_var<T: Element>(values: impl Iterator<Item = T> + Clone) -> (T, T) {
    let (sum, count) = values.clone().fold((T::zero(), 0usize), |(s, k), v| (s + v, k + 1));
    let m = T::from_usize(count.max(1)).unwrap();
    let mean = sum / m;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<T>() / m;
    (mean, var)
}
