//! Slice-level dense kernels. Matrix products go through a blocked GEMM
//! whose summation order depends only on the inner dimension, so a row's
//! result does not change with the number of rows around it.

use super::Element;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul_nn<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out);
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), out);
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(k, m, n, a, (1, k as isize), b, (n as isize, 1), out);
}

pub fn transpose<T: Element>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
