//! Row-major dense kernels on `f64` slices, backed by `matrixmultiply`.
//!
//! `matrixmultiply` runs single-threaded here and accumulates in a fixed
//! order for given shapes, so results are bitwise reproducible.

/// `y[n×out] = x[n×in] · wᵀ` where `w` is stored `[out, in]`.
pub fn linear(x: &[f64], w: &[f64], n: usize, in_dim: usize, out_dim: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n * in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut y = vec![0.0; n * out_dim];
    unsafe {
        matrixmultiply::dgemm(
            n,
            in_dim,
            out_dim,
            1.0,
            x.as_ptr(),
            in_dim as isize,
            1,
            w.as_ptr(),
            1,
            in_dim as isize,
            0.0,
            y.as_mut_ptr(),
            out_dim as isize,
            1,
        );
    }
    y
}

/// `dx[n×in] = dy[n×out] · w` (`w` stored `[out, in]`).
pub fn linear_grad_input(dy: &[f64], w: &[f64], n: usize, in_dim: usize, out_dim: usize) -> Vec<f64> {
    debug_assert_eq!(dy.len(), n * out_dim);
    let mut dx = vec![0.0; n * in_dim];
    unsafe {
        matrixmultiply::dgemm(
            n,
            out_dim,
            in_dim,
            1.0,
            dy.as_ptr(),
            out_dim as isize,
            1,
            w.as_ptr(),
            in_dim as isize,
            1,
            0.0,
            dx.as_mut_ptr(),
            in_dim as isize,
            1,
        );
    }
    dx
}

/// `dw[out×in] += dyᵀ · x`.
pub fn linear_grad_weight(dy: &[f64], x: &[f64], dw: &mut [f64], n: usize, in_dim: usize, out_dim: usize) {
    debug_assert_eq!(dw.len(), out_dim * in_dim);
    unsafe {
        matrixmultiply::dgemm(
            out_dim,
            n,
            in_dim,
            1.0,
            dy.as_ptr(),
            1,
            out_dim as isize,
            x.as_ptr(),
            in_dim as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            in_dim as isize,
            1,
        );
    }
}

pub fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
