//! Bilinear sampling and RoI align on NCHW feature maps.
//!
//! Sampling follows the half-pixel-aligned RoIAlign convention: a box edge at
//! image coordinate `u` lands on feature coordinate `u * scale - 0.5`, so
//! feature cell `i` is centred on continuous coordinate `i`.

use crate::element::Element;

/// Axis-aligned region in image coordinates, tied to one batch item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Up to four `(flat index into an HxW plane, weight)` taps.
pub type Taps = [(usize, f64); 4];

/// Bilinear taps at continuous feature coordinate `(y, x)`; `None` when the
/// point is more than one cell outside the map (contributes zero).
pub fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> Option<Taps> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let (y_low, y_high, ly) = axis_taps(y.max(0.0), h);
    let (x_low, x_high, lx) = axis_taps(x.max(0.0), w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y_low * w + x_low, hy * hx),
        (y_low * w + x_high, hy * lx),
        (y_high * w + x_low, ly * hx),
        (y_high * w + x_high, ly * lx),
    ])
}

fn axis_taps(v: f64, len: usize) -> (usize, usize, f64) {
    let low = v.floor() as usize;
    if low >= len - 1 {
        (len - 1, len - 1, 0.0)
    } else {
        (low, low + 1, v - low as f64)
    }
}

/// Per-bin sample taps for one RoI: `k*k` bins, each with `sampling^2` samples.
pub fn roi_taps(roi: &Roi, h: usize, w: usize, k: usize, scale: f64, sampling: usize) -> Vec<Vec<Taps>> {
    let start_x = roi.x0 * scale - 0.5;
    let start_y = roi.y0 * scale - 0.5;
    let bin_w = (roi.x1 - roi.x0) * scale / k as f64;
    let bin_h = (roi.y1 - roi.y0) * scale / k as f64;
    let mut bins = Vec::with_capacity(k * k);
    for ph in 0..k {
        for pw in 0..k {
            let mut taps = Vec::with_capacity(sampling * sampling);
            for iy in 0..sampling {
                let y = start_y + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sampling as f64;
                for ix in 0..sampling {
                    let x = start_x + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sampling as f64;
                    if let Some(t) = bilinear_taps(h, w, y, x) {
                        taps.push(t);
                    }
                }
            }
            bins.push(taps);
        }
    }
    bins
}

/// Output `(R, C, k, k)`.
pub fn roi_align_forward<T: Element>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    rois: &[Roi],
    k: usize,
    scale: f64,
    sampling: usize,
) -> Vec<T> {
    let _ = n;
    let count = (sampling * sampling) as f64;
    let mut out = vec![T::zero(); rois.len() * c * k * k];
    for (r, roi) in rois.iter().enumerate() {
        let bins = roi_taps(roi, h, w, k, scale, sampling);
        for ci in 0..c {
            let plane = &x[(roi.batch * c + ci) * h * w..][..h * w];
            for (b, taps) in bins.iter().enumerate() {
                let mut acc = 0.0;
                for t in taps {
                    for &(idx, wt) in t {
                        acc += plane[idx].as_f64() * wt;
                    }
                }
                out[(r * c + ci) * k * k + b] = T::from_f64_lossy(acc / count);
            }
        }
    }
    out
}

pub fn roi_align_backward<T: Element>(
    dy: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    rois: &[Roi],
    k: usize,
    scale: f64,
    sampling: usize,
) -> Vec<T> {
    let count = (sampling * sampling) as f64;
    let mut dx = vec![T::zero(); n * c * h * w];
    for (r, roi) in rois.iter().enumerate() {
        let bins = roi_taps(roi, h, w, k, scale, sampling);
        for ci in 0..c {
            let plane = &mut dx[(roi.batch * c + ci) * h * w..][..h * w];
            for (b, taps) in bins.iter().enumerate() {
                let g = dy[(r * c + ci) * k * k + b].as_f64() / count;
                for t in taps {
                    for &(idx, wt) in t {
                        plane[idx] = plane[idx] + T::from_f64_lossy(g * wt);
                    }
                }
            }
        }
    }
    dx
}
