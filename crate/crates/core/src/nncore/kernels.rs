//! Dense kernels for the small row-major matrices a single sequence produces.

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;

use super::Real;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn row<T>(a: &Array2<T>, i: usize) -> &[T] {
    let c = a.ncols();
    &a.as_slice().expect("standard layout")[i * c..(i + 1) * c]
}

#[inline]
pub(crate) fn row_mut<T>(a: &mut Array2<T>, i: usize) -> &mut [T] {
    let c = a.ncols();
    &mut a.as_slice_mut().expect("standard layout")[i * c..(i + 1) * c]
}

/// `x W^T` for `x: n x k`, `w: m x k`.
pub(crate) fn matmul_nt<T: Real>(x: &Array2<T>, w: &Array2<T>) -> Array2<T> {
    x.dot(&w.t())
}

/// `g W` for `g: n x m`, `w: m x k`.
pub(crate) fn matmul_nn<T: Real>(g: &Array2<T>, w: &Array2<T>) -> Array2<T> {
    g.dot(w)
}

/// `dw += g^T x` for `g: n x m`, `x: n x k`, `dw: m x k`.
pub(crate) fn acc_tn<T: Real>(dw: &mut Array2<T>, g: &Array2<T>, x: &Array2<T>) {
    general_mat_mul(T::one(), &g.t(), x, T::one(), dw);
}
