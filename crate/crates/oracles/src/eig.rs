//! Dense eigenvalue moduli via Hessenberg reduction and Francis
//! double-shift QR iteration (values only, no Schur vectors).

use chaosdnn_core::Matrix;

fn hessenberg(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut h = a.clone();
    for k in 0..n.saturating_sub(2) {
        // Householder on column k, rows k+1..n.
        let mut v: Vec<f64> = (k + 1..n).map(|i| h.get(i, k)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = -v[0].signum() * norm;
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for x in &mut v {
            *x /= vnorm;
        }
        // H <- P H P with P = I - 2 v v^T acting on rows/cols k+1..n.
        for c in 0..n {
            let mut proj = 0.0;
            for i in k + 1..n {
                proj += v[i - k - 1] * h.get(i, c);
            }
            for i in k + 1..n {
                let val = h.get(i, c) - 2.0 * proj * v[i - k - 1];
                h.set(i, c, val);
            }
        }
        for r in 0..n {
            let mut proj = 0.0;
            for j in k + 1..n {
                proj += v[j - k - 1] * h.get(r, j);
            }
            for j in k + 1..n {
                let val = h.get(r, j) - 2.0 * proj * v[j - k - 1];
                h.set(r, j, val);
            }
        }
    }
    h
}

/// Eigenvalue magnitudes of a real square matrix, descending.
pub fn eig_moduli(a: &Matrix) -> Vec<f64> {
    assert_eq!(a.rows(), a.cols(), "eig_moduli: square matrix required");
    let n = a.rows();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![a.get(0, 0).abs()];
    }
    let mut h = hessenberg(a);
    let eps = f64::EPSILON;
    let mut p = n;
    let mut stall = 0usize;
    let mut steps = 0usize;
    let cap = 120 * n;
    while p > 2 && steps < cap {
        steps += 1;
        // Zero negligible subdiagonals.
        for i in 1..p {
            let tol = eps * (h.get(i, i).abs() + h.get(i - 1, i - 1).abs()).max(f64::MIN_POSITIVE);
            if h.get(i, i - 1).abs() <= tol {
                h.set(i, i - 1, 0.0);
            }
        }
        if h.get(p - 1, p - 2) == 0.0 {
            p -= 1;
            stall = 0;
            continue;
        }
        if p > 2 && h.get(p - 2, p - 3) == 0.0 {
            p -= 2;
            stall = 0;
            continue;
        }
        // Active unreduced window [l, p).
        let mut l = p - 1;
        while l > 0 && h.get(l, l - 1) != 0.0 {
            l -= 1;
        }
        if p - l == 2 {
            // A decoupled 2x2 at the top of the window deflates as a block.
            p = l.max(2);
            if p == 2 && l == 0 {
                break;
            }
            stall = 0;
            continue;
        }
        stall += 1;
        let (s, t) = if stall % 11 == 0 {
            // Exceptional shift to break symmetric stalls.
            let w = 0.75 * h.get(p - 1, p - 2).abs() + h.get(p - 1, p - 1);
            (2.0 * w, w * w)
        } else {
            let a11 = h.get(p - 2, p - 2);
            let a12 = h.get(p - 2, p - 1);
            let a21 = h.get(p - 1, p - 2);
            let a22 = h.get(p - 1, p - 1);
            (a11 + a22, a11 * a22 - a12 * a21)
        };
        // First column of (H - s1)(H - s2) restricted to three entries.
        let mut x = h.get(l, l) * h.get(l, l) + h.get(l, l + 1) * h.get(l + 1, l)
            - s * h.get(l, l)
            + t;
        let mut y = h.get(l + 1, l) * (h.get(l, l) + h.get(l + 1, l + 1) - s);
        let mut z = if l + 2 < p {
            h.get(l + 2, l + 1) * h.get(l + 1, l)
        } else {
            0.0
        };
        for k in l..p - 2 {
            // Householder zeroing (y, z) against x.
            let norm = (x * x + y * y + z * z).sqrt();
            if norm != 0.0 {
                let alpha = -x.signum() * norm;
                let mut v = [x - alpha, y, z];
                let vnorm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if vnorm != 0.0 {
                    for e in &mut v {
                        *e /= vnorm;
                    }
                    let r0 = k;
                    let height = if k + 3 <= p { 3 } else { p - k };
                    // Rows r0..r0+height, all active columns.
                    let cfrom = if k > l { k - 1 } else { l };
                    for c in cfrom..p {
                        let mut proj = 0.0;
                        for (d, vd) in v.iter().enumerate().take(height) {
                            proj += vd * h.get(r0 + d, c);
                        }
                        for (d, vd) in v.iter().enumerate().take(height) {
                            let val = h.get(r0 + d, c) - 2.0 * proj * vd;
                            h.set(r0 + d, c, val);
                        }
                    }
                    let rto = (k + 4).min(p);
                    for r in l..rto {
                        let mut proj = 0.0;
                        for (d, vd) in v.iter().enumerate().take(height) {
                            proj += vd * h.get(r, r0 + d);
                        }
                        for (d, vd) in v.iter().enumerate().take(height) {
                            let val = h.get(r, r0 + d) - 2.0 * proj * vd;
                            h.set(r, r0 + d, val);
                        }
                    }
                }
            }
            x = h.get(k + 1, k);
            y = h.get(k + 2, k);
            z = if k + 3 < p { h.get(k + 3, k) } else { 0.0 };
        }
        // Final Givens rotation on (x, y).
        let norm = (x * x + y * y).sqrt();
        if norm != 0.0 {
            let c = x / norm;
            let sg = y / norm;
            for col in p - 3..p {
                let a1 = h.get(p - 2, col);
                let a2 = h.get(p - 1, col);
                h.set(p - 2, col, c * a1 + sg * a2);
                h.set(p - 1, col, -sg * a1 + c * a2);
            }
            for row in l..p {
                let a1 = h.get(row, p - 2);
                let a2 = h.get(row, p - 1);
                h.set(row, p - 2, c * a1 + sg * a2);
                h.set(row, p - 1, -sg * a1 + c * a2);
            }
        }
    }
    // Read moduli off the quasi-triangular matrix.
    let mut moduli = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let sub = if i + 1 < n { h.get(i + 1, i).abs() } else { 0.0 };
        let tol = f64::EPSILON * (h.get(i, i).abs() + if i + 1 < n { h.get(i + 1, i + 1).abs() } else { 0.0 }).max(1e-300);
        if i + 1 < n && sub > tol {
            let a11 = h.get(i, i);
            let a12 = h.get(i, i + 1);
            let a21 = h.get(i + 1, i);
            let a22 = h.get(i + 1, i + 1);
            let tr = a11 + a22;
            let det = a11 * a22 - a12 * a21;
            let disc = tr * tr / 4.0 - det;
            if disc < 0.0 {
                let m = det.abs().sqrt();
                moduli.push(m);
                moduli.push(m);
            } else {
                let s = disc.sqrt();
                moduli.push((tr / 2.0 + s).abs());
                moduli.push((tr / 2.0 - s).abs());
            }
            i += 2;
        } else {
            moduli.push(h.get(i, i).abs());
            i += 1;
        }
    }
    moduli.sort_by(|a, b| b.partial_cmp(a).unwrap());
    moduli
}

/// Spectral radius from [`eig_moduli`].
pub fn spectral_radius_qr(a: &Matrix) -> f64 {
    eig_moduli(a).first().copied().unwrap_or(0.0)
}
