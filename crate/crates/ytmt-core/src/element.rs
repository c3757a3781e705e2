use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Scalar element type the engine is generic over.
///
/// Training runs in `f32`; gradient checking runs the same code paths in
/// `f64` so finite differences have headroom. The only per-type dispatch is
/// the GEMM inner kernel.
pub trait Element:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;

    /// `C = alpha * A(m,k) . B(k,n) + beta * C(m,n)` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers must cover the strided extents implied by `m`, `k`, `n`.
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
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C(m,n) = A(m,k) . B(k,n)`, overwriting `C`.
pub fn gemm_rowmajor<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_rowmajor_acc(m, k, n, T::one(), a, b, T::zero(), c)
}

/// Row-major `C = alpha * A . B + beta * C`.
pub fn gemm_rowmajor_acc<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
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

/// Row-major `C(m,n) = A^T(m,k) . B(k,n)` where `A` is stored as `(k, m)`.
pub fn gemm_at_b<T: Element>(m: usize, k: usize, n: usize, a_t: &[T], b: &[T], c: &mut [T]) {
    assert!(a_t.len() >= k * m && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a_t.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Row-major `C(m,n) += A(m,k) . B^T(k,n)` where `B` is stored as `(n, k)`.
pub fn gemm_a_bt_acc<T: Element>(m: usize, k: usize, n: usize, a: &[T], b_t: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b_t.len() >= n * k && c.len() >= m * n, "gemm buffer too small");
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b_t.as_ptr(),
            1,
            k as isize,
            T::one(),
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}
