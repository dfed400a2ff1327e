//! Floating-point element types the tensor engine runs on.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type of every tensor: `f32` for training, `f64` for gradient checking.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Name used in manifests and diagnostics.
    const NAME: &'static str;

    /// `c = a · b` (or `c += a · b` when `accumulate`) for an `m×k` by `k×n`
    /// product with arbitrary positive strides.
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
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (usize, usize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * strides.0 + (cols - 1) * strides.1;
    assert!(last < len, "gemm operand {what} out of bounds: {last} >= {len}");
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                c: &mut [Self],
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(c.len(), m, n, (n, 1), "c");
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                check_extent(a.len(), m, k, a_strides, "a");
                check_extent(b.len(), k, n, b_strides, "b");
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index touched by the kernel was bounds-checked above,
                // and `c` does not alias `a` or `b` (distinct borrows).
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposed_strides() {
        // a = [[1,2],[3,4]], b = [[0,1],[1,0]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [0.0f64, 1.0, 1.0, 0.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, (2, 1), &b, (2, 1), &mut c, false);
        assert_eq!(c, [2.0, 1.0, 4.0, 3.0]);
        // aᵀ · b
        f64::gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), &mut c, false);
        assert_eq!(c, [3.0, 1.0, 4.0, 2.0]);
        f64::gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), &mut c, true);
        assert_eq!(c, [6.0, 2.0, 8.0, 4.0]);
    }

    #[test]
    fn gemm_with_empty_inner_dimension_zeroes_output() {
        let mut c = [5.0f32; 4];
        f32::gemm(2, 0, 2, &[], (0, 1), &[], (2, 1), &mut c, false);
        assert_eq!(c, [0.0; 4]);
    }
}
