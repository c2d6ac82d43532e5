//! im2col-based 2-D cross-correlation over NCHW batches.

use crate::element::Element;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(Self { n, c, h, w, kh, kw, stride, pad, oh, ow })
    }

    /// Rows of the column matrix.
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output columns `lo..hi` whose stride-1 tap `kx` lands inside the row.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow).max(lo);
        (lo, hi)
    }

    /// Output positions per sample.
    pub fn p(&self) -> usize {
        self.oh * self.ow
    }
}

/// Column matrix of shape `(C*kh*kw, N*oh*ow)`.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.n * g.p();
    let mut col = vec![T::zero(); g.k() * np];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * np..(row + 1) * np];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let base = ni * g.p();
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        let drow = &mut dst[base + oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let (lo, hi) = g.valid_ox(kx);
                            drow[lo..hi].copy_from_slice(&srow[lo + kx - g.pad..hi + kx - g.pad]);
                            continue;
                        }
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Transpose of [`im2col`], shape `(N*oh*ow, C*kh*kw)`, built directly.
pub fn im2row<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.k();
    let mut rows = vec![T::zero(); g.n * g.p() * k];
    for ni in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut rows[(ni * g.p() + oy * g.ow + ox) * k..][..k];
                for ci in 0..g.c {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        let drow = &mut dst[(ci * g.kh + ky) * g.kw..][..g.kw];
                        let ix0 = (ox * g.stride) as isize - g.pad as isize;
                        if ix0 >= 0 && ix0 as usize + g.kw <= g.w {
                            drow.copy_from_slice(&srow[ix0 as usize..ix0 as usize + g.kw]);
                            continue;
                        }
                        for (kx, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    rows
}

/// Adjoint of [`im2col`]: scatter-add columns back into an NCHW buffer.
pub fn col2im<T: Element>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.n * g.p();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * np..(row + 1) * np];
                for ni in 0..g.n {
                    let dst = &mut x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let base = ni * g.p();
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..][..g.w];
                        let srow = &src[base + oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let (lo, hi) = g.valid_ox(kx);
                            for (d, &s) in drow[lo + kx - g.pad..hi + kx - g.pad].iter_mut().zip(&srow[lo..hi]) {
                                *d = *d + s;
                            }
                            continue;
                        }
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] = drow[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(O, N*P)` to `(N, O, P)`.
pub fn onp_to_nop<T: Element>(src: &[T], o: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); o * n * p];
    for oi in 0..o {
        for ni in 0..n {
            out[(ni * o + oi) * p..][..p].copy_from_slice(&src[oi * n * p + ni * p..][..p]);
        }
    }
    out
}

/// `(N, O, P)` to `(O, N*P)`.
pub fn nop_to_onp<T: Element>(src: &[T], o: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); o * n * p];
    for ni in 0..n {
        for oi in 0..o {
            out[oi * n * p + ni * p..][..p].copy_from_slice(&src[(ni * o + oi) * p..][..p]);
        }
    }
    out
}

/// What the forward pass keeps for backward.
#[derive(Debug, Clone)]
pub enum ConvCache<T> {
    /// General path; backward rebuilds what it needs from the input.
    Im2col,
    /// Small map: the conv ran as one product with an unrolled weight.
    Dense(Arc<Unrolled<T>>),
}

/// A kernel expanded to the dense matrix it applies to one small map.
#[derive(Debug, Clone)]
pub struct Unrolled<T> {
    /// `(C*H*W, O*oh*ow)`.
    pub big: Vec<T>,
    /// Transpose of `big`.
    pub big_t: Vec<T>,
}

const NO_TAP: u8 = u8::MAX;

impl ConvGeom {
    /// Tiny maps run faster as one dense product than through im2col.
    pub fn prefers_dense(&self) -> bool {
        self.h * self.w <= 2 * self.kh * self.kw && self.kh * self.kw < NO_TAP as usize
    }

    /// Kernel tap linking input pixel `ip` to output pixel `op`, at `ip * P + op`.
    fn tap_table(&self) -> Vec<u8> {
        let p = self.p();
        let mut table = vec![NO_TAP; self.h * self.w * p];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if iy >= 0 && ix >= 0 && iy < self.h as isize && ix < self.w as isize {
                            let ip = iy as usize * self.w + ix as usize;
                            table[ip * p + oy * self.ow + ox] = (ky * self.kw + kx) as u8;
                        }
                    }
                }
            }
        }
        table
    }
}

/// Expand `w` for dense application on maps of geometry `g`.
pub fn unroll<T: Element>(w: &[T], g: &ConvGeom, out_c: usize) -> Unrolled<T> {
    let (hw, p, kk) = (g.h * g.w, g.p(), g.kh * g.kw);
    let taps = g.tap_table();
    let tap = |wk: &[T], t: u8| if t == NO_TAP { T::zero() } else { wk[t as usize] };
    let mut big = Vec::with_capacity(g.c * hw * out_c * p);
    for ci in 0..g.c {
        for ip in 0..hw {
            let row = &taps[ip * p..][..p];
            for oi in 0..out_c {
                let wk = &w[(oi * g.c + ci) * kk..][..kk];
                big.extend(row.iter().map(|&t| tap(wk, t)));
            }
        }
    }
    let mut big_t = Vec::with_capacity(big.len());
    for oi in 0..out_c {
        for op in 0..p {
            for ci in 0..g.c {
                let wk = &w[(oi * g.c + ci) * kk..][..kk];
                big_t.extend((0..hw).map(|ip| tap(wk, taps[ip * p + op])));
            }
        }
    }
    Unrolled { big, big_t }
}

fn add_bias<T: Element>(out: &mut [T], b: &[T], n: usize, p: usize) {
    let o = b.len();
    for ni in 0..n {
        for (oi, &bv) in b.iter().enumerate() {
            for v in &mut out[(ni * o + oi) * p..][..p] {
                *v = *v + bv;
            }
        }
    }
}

fn bias_grad<T: Element>(dy: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); o];
    for ni in 0..n {
        for (oi, d) in db.iter_mut().enumerate() {
            *d = *d + dy[(ni * o + oi) * p..][..p].iter().copied().sum::<T>();
        }
    }
    db
}

/// im2col forward pass. Returns the NCHW output and what backward needs.
pub fn conv2d_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    out_c: usize,
) -> (Vec<T>, ConvCache<T>) {
    let np = g.n * g.p();
    let col = im2col(x, g);
    let mut tmp = vec![T::zero(); out_c * np];
    T::gemm(false, false, out_c, np, g.k(), T::one(), w, &col, T::zero(), &mut tmp);
    let mut out = onp_to_nop(&tmp, out_c, g.n, g.p());
    if let Some(b) = bias {
        add_bias(&mut out, b, g.n, g.p());
    }
    (out, ConvCache::Im2col)
}

/// Forward pass as one product of the `(N, C*H*W)` input with an unrolled kernel.
pub fn conv2d_dense_forward<T: Element>(
    x: &[T],
    un: Arc<Unrolled<T>>,
    bias: Option<&[T]>,
    g: &ConvGeom,
    out_c: usize,
) -> (Vec<T>, ConvCache<T>) {
    let (k, cols) = (g.c * g.h * g.w, out_c * g.p());
    let mut out = vec![T::zero(); g.n * cols];
    T::gemm(false, false, g.n, cols, k, T::one(), x, &un.big, T::zero(), &mut out);
    if let Some(b) = bias {
        add_bias(&mut out, b, g.n, g.p());
    }
    (out, ConvCache::Dense(un))
}

/// Gradients `(dx, dw, db)` given the upstream gradient in NCHW layout.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    dy: &[T],
    x: &[T],
    w: &[T],
    cache: &ConvCache<T>,
    g: &ConvGeom,
    out_c: usize,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let p = g.p();
    let db = bias_grad(dy, g.n, out_c, p);
    if let ConvCache::Dense(un) = cache {
        let (hw, k, cols, kk) = (g.h * g.w, g.c * g.h * g.w, out_c * p, g.kh * g.kw);
        let mut dbig = vec![T::zero(); k * cols];
        T::gemm(true, false, k, cols, g.n, T::one(), x, dy, T::zero(), &mut dbig);
        let taps = g.tap_table();
        let mut dw = vec![T::zero(); out_c * g.k()];
        let mut rows = dbig.chunks_exact(p);
        for ci in 0..g.c {
            for ip in 0..hw {
                let trow = &taps[ip * p..][..p];
                for oi in 0..out_c {
                    let dk = &mut dw[(oi * g.c + ci) * kk..][..kk];
                    let drow = rows.next().expect("dbig has C*H*W*O rows of P");
                    for (&t, &v) in trow.iter().zip(drow) {
                        if t != NO_TAP {
                            dk[t as usize] = dk[t as usize] + v;
                        }
                    }
                }
            }
        }
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); g.n * k];
            T::gemm(false, false, g.n, k, cols, T::one(), dy, &un.big_t, T::zero(), &mut dx);
            dx
        });
        return (dx, dw, db);
    }
    let np = g.n * p;
    let dt = nop_to_onp(dy, out_c, g.n, p);
    let mut dw = vec![T::zero(); out_c * g.k()];
    T::gemm(false, false, out_c, g.k(), np, T::one(), &dt, &im2row(x, g), T::zero(), &mut dw);
    let dx = need_dx.then(|| {
        let mut dcol = vec![T::zero(); g.k() * np];
        T::gemm(true, false, g.k(), np, out_c, T::one(), w, &dt, T::zero(), &mut dcol);
        col2im(&dcol, g)
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(x: &[f64], w: &[f64], g: &ConvGeom, o: usize) -> Vec<f64> {
        let mut out = vec![0.0; g.n * o * g.p()];
        for ni in 0..g.n {
            for oi in 0..o {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ci in 0..g.c {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((ni * g.c + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((oi * g.c + ci) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                        out[((ni * o + oi) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0), (1, 2)] {
            let g = ConvGeom::new(2, 3, 5, 7, 3, 3, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 3 * 35).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..4 * 27).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
            let (y, _) = conv2d_forward(&x, &w, None, &g, 4);
            let want = direct(&x, &w, &g, 4);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dense_path_matches_im2col_path() {
        for &(h, w, stride, pad) in &[(3, 3, 1, 1), (3, 3, 2, 1), (2, 4, 1, 1), (3, 6, 1, 1), (4, 4, 2, 0)] {
            let g = ConvGeom::new(3, 2, h, w, 3, 3, stride, pad).unwrap();
            assert!(g.prefers_dense());
            let x: Vec<f64> = (0..3 * 2 * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
            let wt: Vec<f64> = (0..4 * 18).map(|i| (i as f64 * 0.23).cos()).collect();
            let un = Arc::new(unroll(&wt, &g, 4));
            let (y, cache) = conv2d_dense_forward(&x, un, Some(&[0.1, -0.2, 0.3, 0.0]), &g, 4);
            let mut want = direct(&x, &wt, &g, 4);
            add_bias(&mut want, &[0.1, -0.2, 0.3, 0.0], 3, g.p());
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
            let dy: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.71).sin()).collect();
            let dense = conv2d_backward(&dy, &x, &wt, &cache, &g, 4, true);
            let cols = conv2d_backward(&dy, &x, &wt, &ConvCache::Im2col, &g, 4, true);
            for (a, b) in [(&dense.0.unwrap(), &cols.0.unwrap()), (&dense.1, &cols.1), (&dense.2, &cols.2)] {
                assert_eq!(a.len(), b.len());
                for (u, v) in a.iter().zip(b.iter()) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn im2row_is_transposed_im2col() {
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
            let g = ConvGeom::new(2, 3, 4, 5, 3, 3, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 3 * 20).map(|i| (i as f64 * 0.37).sin()).collect();
            let (col, rows) = (im2col(&x, &g), im2row(&x, &g));
            let (k, np) = (g.k(), g.n * g.p());
            for r in 0..k {
                for c in 0..np {
                    assert_eq!(col[r * np + c], rows[c * k + r]);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        for &(stride, pad) in &[(2, 1), (1, 1), (1, 2)] {
            let g = ConvGeom::new(2, 2, 4, 5, 3, 3, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 2 * 20).map(|i| (i as f64 * 0.37).sin()).collect();
            let c: Vec<f64> = (0..g.k() * g.n * g.p()).map(|i| (i as f64 * 0.11).cos()).collect();
            let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&col2im(&c, &g)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
