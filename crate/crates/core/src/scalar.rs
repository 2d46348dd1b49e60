//! Floating-point element types the network can be instantiated with.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

use crate::numerics::fastmath;

/// Element type of every tensor in the crate.
///
/// Training runs in `f32` by default; gradient checks run in `f64`.
/// Besides the usual float arithmetic, implementors supply a dense
/// matrix-multiply kernel and the error function used by exact GELU.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name used in logs and manifests (`"f32"` / `"f64"`).
    const NAME: &'static str;

    fn erf(self) -> Self;

    /// `exp` as used by activation kernels; may trade the last bits of
    /// precision for speed.
    #[inline]
    fn kernel_exp(self) -> Self {
        self.exp()
    }

    #[inline]
    fn kernel_sin(self) -> Self {
        self.sin()
    }

    #[inline]
    fn kernel_cos(self) -> Self {
        self.cos()
    }

    /// `c = alpha * a @ b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// The pointers must address valid `m x k`, `k x n` and `m x n`
    /// matrices under the given strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every scalar type")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to float")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn erf(self) -> Self {
        fastmath::erf(f64::from(self)) as f32
    }

    #[inline(always)]
    fn kernel_exp(self) -> Self {
        // Flush results below the f32 normal range to zero before narrowing.
        let r = fastmath::exp(f64::from(self));
        (if r < f64::from(f32::MIN_POSITIVE) { 0.0 } else { r }) as f32
    }

    #[inline(always)]
    fn kernel_sin(self) -> Self {
        fastmath::sin(f64::from(self)) as f32
    }

    #[inline(always)]
    fn kernel_cos(self) -> Self {
        fastmath::cos(f64::from(self)) as f32
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_matches_known_values() {
        assert!((Scalar::erf(0.5f64) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((Scalar::erf(0.5f32) - 0.520_499_9).abs() < 1e-6);
        assert_eq!(Scalar::erf(0.0f64), 0.0);
    }

    #[test]
    fn gemm_small() {
        // [1 2; 3 4] @ [5; 6] = [17; 39]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0];
        let mut c = [0.0f64; 2];
        unsafe {
            f64::gemm_raw(2, 2, 1, 1.0, a.as_ptr(), 2, 1, b.as_ptr(), 1, 1, 0.0, c.as_mut_ptr(), 1, 1);
        }
        assert_eq!(c, [17.0, 39.0]);
    }
}
