use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Element type of a [`Tensor`](super::Tensor).
///
/// Training runs in `f32`; gradient checking evaluates the same graph code in
/// `f64`. The trait carries the one primitive that differs per type, the
/// dense matrix product.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b (+ c when accumulate)` for row/column strided operands.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
        c_row_stride: usize,
        accumulate: bool,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (usize, usize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * strides.0 + (cols - 1) * strides.1;
    assert!(last < len, "gemm operand {what} out of bounds: need index {last}, have {len}");
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                c: &mut [Self],
                c_row_stride: usize,
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(c.len(), m, n, (c_row_stride, 1), "c");
                if k == 0 {
                    if !accumulate {
                        for i in 0..m {
                            c[i * c_row_stride..i * c_row_stride + n].fill(0.0);
                        }
                    }
                    return;
                }
                check_extent(a.len(), m, k, a_strides, "a");
                check_extent(b.len(), k, n, b_strides, "b");
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index reachable through the given shapes and
                // strides was bounds-checked against the slices above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_row_stride as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, &a, (3, 1), &b, (4, 1), &mut c, 4, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // transposed view of b through strides, accumulating
        let mut d = vec![1.0; 6];
        f64::gemm(2, 4, 3, &c, (4, 1), &b, (1, 4), &mut d, 3, true);
        for i in 0..2 {
            for j in 0..3 {
                let want: f64 = 1.0 + (0..4).map(|p| c[i * 4 + p] * b[j * 4 + p]).sum::<f64>();
                assert!((d[i * 3 + j] - want).abs() < 1e-9);
            }
        }
    }
}
