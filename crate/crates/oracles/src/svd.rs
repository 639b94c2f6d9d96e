//! One-sided Jacobi SVD (Hestenes method).

use chaosdnn_core::Matrix;

/// All singular values of `a` in descending order, computed by rotating
/// column pairs until every pair is orthogonal. The singular values are the
/// final column norms.
pub fn jacobi_svd_values(a: &Matrix) -> Vec<f64> {
    // Work on the tall orientation so columns are the short list.
    let mut m = if a.rows() >= a.cols() {
        a.clone()
    } else {
        a.transpose()
    };
    let rows = m.rows();
    let cols = m.cols();
    let eps = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    let x = m.get(i, p);
                    let y = m.get(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= eps * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let x = m.get(i, p);
                    let y = m.get(i, q);
                    m.set(i, p, c * x - s * y);
                    m.set(i, q, s * x + c * y);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigmas: Vec<f64> = (0..cols)
        .map(|j| {
            let mut s = 0.0;
            for i in 0..rows {
                let v = m.get(i, j);
                s += v * v;
            }
            s.sqrt()
        })
        .collect();
    sigmas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sigmas
}
