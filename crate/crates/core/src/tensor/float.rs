use std::fmt::Debug;
use std::iter::Sum;

/// Element type of a [`Tensor`](super::Tensor).
///
/// Training and inference run at `f32`; `f64` exists so gradient checks can
/// be run on the same code without single-precision rounding swamping the
/// finite-difference quotient.
pub trait Float: num_traits::Float + num_traits::FromPrimitive + num_traits::NumAssign + Sum + Debug + Default + Send + Sync + 'static {
    /// Raw strided GEMM: `c = a·b + beta·c`, `c` row-major with row stride `rsc`.
    ///
    /// # Safety
    /// Every strided access implied by the dimensions must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        a_strides: [isize; 2],
        b: *const Self,
        b_strides: [isize; 2],
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn to_f32_lossy(self) -> f32;

    fn from_f32(x: f32) -> Self;
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        [rsa, csa]: [isize; 2],
        b: *const f32,
        [rsb, csb]: [isize; 2],
        beta: f32,
        c: *mut f32,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }

    fn to_f32_lossy(self) -> f32 {
        self
    }

    fn from_f32(x: f32) -> Self {
        x
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        [rsa, csa]: [isize; 2],
        b: *const f64,
        [rsb, csb]: [isize; 2],
        beta: f64,
        c: *mut f64,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }

    fn to_f32_lossy(self) -> f32 {
        self as f32
    }

    fn from_f32(x: f32) -> Self {
        x as f64
    }
}
