//! Brute-force reference implementations used as test oracles.
//!
//! Everything here is deliberately independent of the algorithms it checks:
//! singular values come from one-sided Jacobi orthogonalization (the library
//! uses Gram matrices and power iteration), eigenvalue moduli come from a
//! Francis double-shift QR iteration, matrix exponentials from scaling and
//! squaring, and derivatives from central finite differences. Accuracy is
//! favored over speed throughout; these run at test scale only.

pub mod eig;
pub mod expm;
pub mod fd;
pub mod svd;

pub use eig::eig_moduli;
pub use expm::expm;
pub use fd::{central_grad, central_jacobian, perturbation_ftmle, perturbation_ftmle_random};
pub use svd::jacobi_svd_values;

use chaosdnn_core::Matrix;

/// Naive sliding-window valid convolution of a single-channel image with a
/// bank of kernels, plus per-channel bias. Output channel-major
/// `[c][oi][oj]` flattened.
pub fn conv2d_naive(
    image: &[f64],
    h: usize,
    w: usize,
    kernels: &Matrix, // channels x (k*k)
    bias: &[f64],
    k: usize,
) -> Vec<f64> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let channels = kernels.rows();
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let ker = kernels.row(c);
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = bias[c];
                for a in 0..k {
                    for b in 0..k {
                        acc += ker[a * k + b] * image[(oi + a) * w + (oj + b)];
                    }
                }
                out[c * oh * ow + oi * ow + oj] = acc;
            }
        }
    }
    out
}
