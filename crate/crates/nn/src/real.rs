use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

/// Floating-point element type usable by the kernel.
///
/// Only `f32` and `f64` implement it. The GEMM entry point dispatches to the
/// matching `matrixmultiply` routine.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + AddAssign + Send + Sync + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
    ///
    /// # Safety
    /// The strides and dimensions must describe memory fully contained in
    /// the respective slices.
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

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }

    /// Elementwise Mish `x·tanh(softplus(x))`.
    fn mish_slice(x: &[Self], out: &mut [Self]) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o = mish_ref(v);
        }
    }

    /// Accumulates `g·mish'(x)` into `acc`.
    fn mish_grad_slice(x: &[Self], g: &[Self], acc: &mut [Self]) {
        for ((a, &gv), &v) in acc.iter_mut().zip(g).zip(x) {
            *a += gv * mish_grad_ref(v);
        }
    }
}

// tanh(ln(1+e^x)) = n / (n + 2) with n = e^x (e^x + 2)
#[inline]
fn mish_ref<T: Float + FromPrimitive>(x: T) -> T {
    let c20 = T::from_f64(20.0).unwrap();
    if x > c20 {
        return x;
    }
    let two = T::from_f64(2.0).unwrap();
    let e = x.exp();
    let n = e * (e + two);
    x * n / (n + two)
}

#[inline]
fn mish_grad_ref<T: Float + FromPrimitive>(x: T) -> T {
    let c20 = T::from_f64(20.0).unwrap();
    if x > c20 {
        return T::one();
    }
    let two = T::from_f64(2.0).unwrap();
    let e = x.exp();
    let n = e * (e + two);
    let d = n + two;
    let dn = two * e * (e + T::one());
    n / d + x * two * dn / (d * d)
}

/// Polynomial `e^x` for `x ≤ 20.5`, written so the compiler can vectorize
/// it. Relative error is a few ulp.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    let x = x.max(-87.0).min(20.5);
    let n = (x * std::f32::consts::LOG2_E + 12_582_912.0) - 12_582_912.0;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((n as i32 + 127) << 23) as u32)
}

impl Real for f32 {
    fn mish_slice(x: &[f32], out: &mut [f32]) {
        for (o, &v) in out.iter_mut().zip(x) {
            let e = exp_f32(v);
            let n = e * (e + 2.0);
            let m = v * n / (n + 2.0);
            *o = if v > 20.0 { v } else { m };
        }
    }

    fn mish_grad_slice(x: &[f32], g: &[f32], acc: &mut [f32]) {
        for ((a, &gv), &v) in acc.iter_mut().zip(g).zip(x) {
            let e = exp_f32(v);
            let n = e * (e + 2.0);
            let d = n + 2.0;
            let dn = 2.0 * e * (e + 1.0);
            let dm = n / d + v * 2.0 * dn / (d * d);
            *a += gv * if v > 20.0 { 1.0 } else { dm };
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix product `c (+)= op(a) · op(b)` where `op(a)` is `m×k`
/// and `op(b)` is `k×n`. `a_t`/`b_t` select the transposed view of a
/// row-major buffer.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "matmul: lhs length");
    assert_eq!(b.len(), k * n, "matmul: rhs length");
    assert_eq!(c.len(), m * n, "matmul: out length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths asserted above match the strided views.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
