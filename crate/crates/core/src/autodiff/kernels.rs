//! Dense kernels used by the tape. Matrix products go through a blocked
//! single-threaded GEMM, so results do not depend on the thread count.

use crate::scalar::{MatRef, Scalar};

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut tail = S::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    S::gemm(m, k, n, S::one(), MatRef::row_major(a, k), MatRef::row_major(b, n), S::zero(), &mut out, n);
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub(crate) fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    S::gemm(m, k, n, S::one(), MatRef::row_major(a, k), MatRef::transposed(b, k), S::zero(), &mut out, n);
    out
}

/// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`; result `m×n`.
pub(crate) fn matmul_tn<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    S::gemm(m, k, n, S::one(), MatRef::transposed(a, m), MatRef::row_major(b, n), S::zero(), &mut out, n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        for (m, k, n) in [(5, 7, 3), (3, 150, 70), (130, 9, 2)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            let want = naive(&a, &b, m, k, n);
            let got = matmul(&a, &b, m, k, n);
            let got_nt = matmul_nt(&a, &transpose(&b, k, n), m, k, n);
            let got_tn = matmul_tn(&transpose(&a, m, k), &b, k, m, n);
            for i in 0..m * n {
                assert!((want[i] - got[i]).abs() < 1e-12);
                assert!((want[i] - got_nt[i]).abs() < 1e-12);
                assert!((want[i] - got_tn[i]).abs() < 1e-12);
            }
        }
    }
}
