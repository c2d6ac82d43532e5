//! Conversions from images and masks to NCHW tensors.

use crate::render::{Image, SemanticMask};
use bdl_tensor::{Element, Tensor};

/// `(N, 3, H, W)` with values in `[0, 1]`.
pub fn images_to_tensor<T: Element>(images: &[&Image]) -> Tensor<T> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert_eq!((img.height, img.width), (h, w), "images in a batch must share dimensions");
        for c in 0..3 {
            data.extend(img.data[c..].iter().step_by(3).map(|&v| T::from_f64_lossy(v as f64 / 255.0)));
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data).expect("sizes agree")
}

/// `(N, 2, H, W)` one-hot `(table, border)` planes.
pub fn masks_to_tensor<T: Element>(masks: &[&SemanticMask]) -> Tensor<T> {
    let (h, w) = masks.first().map_or((0, 0), |m| (m.height, m.width));
    let mut data = Vec::with_capacity(masks.len() * 2 * h * w);
    for m in masks {
        assert_eq!((m.height, m.width), (h, w), "masks in a batch must share dimensions");
        data.extend(m.border.iter().map(|&b| if b { T::zero() } else { T::one() }));
        data.extend(m.border.iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    Tensor::from_vec(&[masks.len(), 2, h, w], data).expect("sizes agree")
}

/// `(N, 2, H, W)` planes holding each cell centre's normalized `(x, y)`.
pub fn coord_channels<T: Element>(n: usize, h: usize, w: usize) -> Tensor<T> {
    let mut plane = Vec::with_capacity(2 * h * w);
    plane.extend((0..h).flat_map(|_| (0..w).map(|x| T::from_f64_lossy((x as f64 + 0.5) / w as f64))));
    plane.extend((0..h).flat_map(|y| (0..w).map(move |_| T::from_f64_lossy((y as f64 + 0.5) / h as f64))));
    let data = (0..n).flat_map(|_| plane.iter().copied()).collect();
    Tensor::from_vec(&[n, 2, h, w], data).expect("sizes agree")
}
