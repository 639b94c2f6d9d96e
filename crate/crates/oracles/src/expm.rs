//! Matrix exponential by scaling and squaring with a Taylor kernel.

use chaosdnn_core::Matrix;

/// `exp(A)` for a square matrix. The norm is scaled below 1/4, the series
/// is summed to machine precision, and the result squared back up.
pub fn expm(a: &Matrix) -> Matrix {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let norm = a.max_abs() * n as f64;
    let mut s = 0u32;
    while norm / f64::powi(2.0, s as i32) > 0.25 {
        s += 1;
    }
    let scaled = a.scale(1.0 / f64::powi(2.0, s as i32));
    let mut result = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=24 {
        term = term.matmul(&scaled);
        term.scale_mut(1.0 / k as f64);
        result.add_scaled(1.0, &term);
        if term.max_abs() < 1e-300 {
            break;
        }
    }
    for _ in 0..s {
        result = result.matmul(&result);
    }
    result
}
