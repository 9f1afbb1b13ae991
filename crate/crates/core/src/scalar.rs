//! Floating-point scalar abstraction shared by every numeric module.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::sync::Arc;

use num_traits::{Float, FloatConst, FromPrimitive};
use rustfft::{Fft, FftNum, FftPlanner};

/// Real scalar usable by the tensor engine: `f32` or `f64`.
///
/// Besides the usual float arithmetic it carries the two kernels the engine
/// cannot express generically: a strided matrix multiply and a cached FFT
/// planner.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + FftNum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Gauss error function.
    fn erf(self) -> Self;

    /// `C <- alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing
    /// (for `c`) matrices of the stated shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    /// Complex FFT plan of length `n`, cached per thread.
    fn fft_plan(n: usize, inverse: bool) -> Arc<dyn Fft<Self>>;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $erf:path, $cache:ident) => {
        thread_local! {
            static $cache: RefCell<FftPlanner<$t>> = RefCell::new(FftPlanner::new());
        }

        impl Scalar for $t {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }

            unsafe fn gemm(
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
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }

            fn fft_plan(n: usize, inverse: bool) -> Arc<dyn Fft<Self>> {
                $cache.with(|p| {
                    let mut p = p.borrow_mut();
                    if inverse {
                        p.plan_fft_inverse(n)
                    } else {
                        p.plan_fft_forward(n)
                    }
                })
            }
        }
    };
}

impl_scalar!(f64, matrixmultiply::dgemm, libm::erf, PLANNER_F64);
impl_scalar!(f32, matrixmultiply::sgemm, libm::erff, PLANNER_F32);

/// Row-major `C[m,n] (+)= A[m,k] * B[k,n]` on contiguous slices.
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths checked above; c does not alias a or b.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `C[m,n] (+)= A[m,k] * B[n,k]^T`.
pub(crate) fn matmul_bt<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: as in `matmul`; B is read through transposed strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `C[m,n] (+)= A[k,m]^T * B[k,n]`.
pub(crate) fn matmul_at<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: as in `matmul`; A is read through transposed strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}
