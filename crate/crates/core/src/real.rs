//! Scalar abstraction shared by every numeric module.
//!
//! All learnable and geometric math is written against [`Real`] so the same
//! code runs in `f32` for training and in `f64` for gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
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
    /// Short type tag, used in diagnostics.
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Strides are in
    /// elements; row stride first, column stride second.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

/// Largest linear offset reachable with the given extents and strides.
fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

fn check_gemm<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &(&[T], isize, isize),
    b: &(&[T], isize, isize),
    c: &(&mut [T], isize, isize),
) {
    assert!(span(m, k, a.1, a.2) <= a.0.len(), "gemm: lhs out of bounds");
    assert!(span(k, n, b.1, b.2) <= b.0.len(), "gemm: rhs out of bounds");
    assert!(span(m, n, c.1, c.2) <= c.0.len(), "gemm: output out of bounds");
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: (&[f32], isize, isize),
        b: (&[f32], isize, isize),
        beta: f32,
        c: (&mut [f32], isize, isize),
    ) {
        check_gemm(m, k, n, &a, &b, &c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents checked against slice lengths above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            );
        }
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: (&[f64], isize, isize),
        b: (&[f64], isize, isize),
        beta: f64,
        c: (&mut [f64], isize, isize),
    ) {
        check_gemm(m, k, n, &a, &b, &c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents checked against slice lengths above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            );
        }
    }
}

/// Row-major `c = a * b` convenience wrapper (overwrites `c`).
pub fn matmul<S: Real>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    S::gemm(
        m,
        k,
        n,
        S::one(),
        (a, k as isize, 1),
        (b, n as isize, 1),
        S::zero(),
        (c, n as isize, 1),
    );
}

/// Sum of a slice accumulated in `f64`.
pub fn sum_f64<S: Real>(xs: &[S]) -> f64 {
    xs.iter().map(|x| x.f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_strides() {
        // c = a^T * b with a stored k x m
        let (m, k, n) = (3, 4, 2);
        let at: Vec<f32> = (0..k * m).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..k * n).map(|i| 1.0 + i as f32).collect();
        let mut c = vec![0.0f32; m * n];
        f32::gemm(m, k, n, 1.0, (&at, 1, m as isize), (&b, n as isize, 1), 0.0, (&mut c, n as isize, 1));
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|p| at[p * m + i] * b[p * n + j]).sum();
                assert_eq!(c[i * n + j], want);
            }
        }
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn bounds_are_checked() {
        let a = vec![0.0f64; 3];
        let b = vec![0.0f64; 4];
        let mut c = vec![0.0f64; 4];
        matmul(2, 2, 2, &a, &b, &mut c);
    }
}
