use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Storage tag written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar usable as tensor storage.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    /// Row-major `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape
    /// `m x k` and `op(b)` of shape `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

#[inline]
fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // `rows x cols` is the shape of op(x); storage is row-major of x itself.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Row-major `rows x cols` to `cols x rows`.
fn transpose<T: Copy + Default>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    const BLOCK: usize = 16;
    assert!(src.len() >= rows * cols);
    let mut out = vec![T::default(); rows * cols];
    for r0 in (0..rows).step_by(BLOCK) {
        let r1 = (r0 + BLOCK).min(rows);
        for c0 in (0..cols).step_by(BLOCK) {
            let c1 = (c0 + BLOCK).min(cols);
            for r in r0..r1 {
                let srow = &src[r * cols + c0..r * cols + c1];
                for (i, &v) in srow.iter().enumerate() {
                    // SAFETY: c0 + i < cols and r < rows, so the index is below rows * cols.
                    unsafe { *out.get_unchecked_mut((c0 + i) * rows + r) = v };
                }
            }
        }
    }
    out
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if trans_b && !trans_a && m * (k + n) < n * k {
                    // C = (B A^T)^T with A^T explicit: two small copies instead of a large one.
                    let at = transpose(a, m, k);
                    let mut ct = vec![<$t>::default(); n * m];
                    Self::gemm(false, false, n, m, k, 1.0, b, &at, 0.0, &mut ct);
                    for (i, row) in c[..m * n].chunks_exact_mut(n).enumerate() {
                        for (j, v) in row.iter_mut().enumerate() {
                            let prod = alpha * ct[j * m + i];
                            *v = if beta == 0.0 { prod } else { beta * *v + prod };
                        }
                    }
                    return;
                }
                let (rsa, csa) = strides(trans_a, m, k);
                let packed;
                let (b, (rsb, csb)) = if trans_b {
                    // matrixmultiply packs a transposed B slowly; an explicit copy is cheaper.
                    packed = transpose(b, n, k);
                    (&packed[..], strides(false, k, n))
                } else {
                    (b, strides(false, k, n))
                };
                // SAFETY: bounds asserted above; strides describe dense row-major storage.
                unsafe {
                    $gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm);
impl_element!(f64, DType::F64, matrixmultiply::dgemm);
