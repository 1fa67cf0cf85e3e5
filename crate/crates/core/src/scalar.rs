use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar used throughout the crate: `f32` for training, `f64` for
/// oracles and gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// `c ← a·b + c` on strided row/column views (`m×k` times `k×n`).
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self], sc: (isize, isize));
}

macro_rules! gemm_impl {
    ($t:ty, $f:ident) => {
        impl Scalar for $t {
            fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self], sc: (isize, isize)) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |r: usize, cols: usize, s: (isize, isize)| {
                    if r == 0 || cols == 0 { 0 } else { ((r - 1) as isize * s.0 + (cols - 1) as isize * s.1) as usize + 1 }
                };
                assert!(a.len() >= span(m, k, sa) && b.len() >= span(k, n, sb) && c.len() >= span(m, n, sc), "gemm: buffer too small");
                // SAFETY: the spans checked above keep every strided access in bounds.
                unsafe {
                    matrixmultiply::$f(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, c.as_mut_ptr(), sc.0, sc.1);
                }
            }
        }
    };
}

gemm_impl!(f32, sgemm);
gemm_impl!(f64, dgemm);

/// Shorthand for [`Scalar::lit`].
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::lit(x)
}
