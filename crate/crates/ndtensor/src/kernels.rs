//! Slice-level compute kernels shared by the forward and backward passes.

use crate::element::Element;

/// `c[p×r] += a[p×q] · b[q×r]`
pub(crate) fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let ai = &a[i * q..(i + 1) * q];
        let ci = &mut c[i * r..(i + 1) * r];
        for (k, &aik) in ai.iter().enumerate() {
            let bk = &b[k * r..(k + 1) * r];
            for (cij, &bkj) in ci.iter_mut().zip(bk) {
                *cij += aik * bkj;
            }
        }
    }
}

/// `c[q×r] += a[p×q]ᵀ · g[p×r]`
pub(crate) fn gemm_tn<T: Element>(a: &[T], g: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let ai = &a[i * q..(i + 1) * q];
        let gi = &g[i * r..(i + 1) * r];
        for (k, &aik) in ai.iter().enumerate() {
            let ck = &mut c[k * r..(k + 1) * r];
            for (ckj, &gij) in ck.iter_mut().zip(gi) {
                *ckj += aik * gij;
            }
        }
    }
}

/// Transposes a `rows×cols` matrix.
pub(crate) fn transpose<T: Element>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = m[i * cols + j];
        }
    }
    out
}

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
