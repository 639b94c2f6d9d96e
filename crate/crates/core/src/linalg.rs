//! Spectral estimation: largest singular value, spectral radius, truncated
//! randomized SVD, symmetric eigendecomposition, and PCA.
//!
//! Design notes:
//! - `max_singular_value` runs power iteration on the Gram matrix of the
//!   smaller side; the "full SVD" used for modest matrices goes through the
//!   Gram matrix and a cyclic Jacobi eigensolver, which is a different route
//!   from the one-sided Jacobi oracle used in tests.
//! - `spectral_radius` augments plain power iteration with a two-step linear
//!   recurrence fit so rotational (complex-pair) dominant eigenvalues
//!   converge too.
//! - All randomized routines draw from an explicit [`RngStream`], so results
//!   are deterministic functions of their inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_arg, Error, Result};
use crate::fmath;
use crate::matrix::{dot, norm2, normalize, Matrix};
use crate::rng::RngStream;

/// Default relative tolerance for the power iterations.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default iteration cap for the power iterations.
pub const DEFAULT_MAX_ITERS: usize = 10_000;
/// Oversampling columns added to the randomized range finder.
pub const RSVD_OVERSAMPLE: usize = 10;
/// Subspace (power) iterations used by the randomized range finder.
pub const RSVD_POWER_ITERS: usize = 2;
/// Dimension threshold below which `sigma_max_auto` uses the full SVD.
pub const FULL_SVD_LIMIT: usize = 64;

fn start_vector(len: usize, tag: u64) -> Vec<f64> {
    let mut rng = RngStream::new(0x5EED_0F_5141, tag ^ len as u64);
    let mut v: Vec<f64> = (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect();
    normalize(&mut v);
    v
}

/// Largest singular value of `a` by power iteration on the smaller Gram
/// matrix. Returns `(sigma_max, iterations)`.
///
/// Convergence is declared when the estimate changes by less than `tol`
/// (relatively) on two consecutive iterations; running out of iterations
/// yields [`Error::NonConvergence`] carrying the best estimate.
pub fn max_singular_value(a: &Matrix, tol: f64, max_iters: usize) -> Result<(f64, usize)> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(invalid_arg("max_singular_value: empty matrix"));
    }
    if !(tol > 0.0) {
        return Err(invalid_arg("max_singular_value: tol must be positive"));
    }
    // Iterate v <- A^T A v (or A A^T v when rows < cols).
    let tall = a.rows() >= a.cols();
    let n = if tall { a.cols() } else { a.rows() };
    let mut v = start_vector(n, 0x51);
    let mut prev = f64::NAN;
    let mut stable = 0usize;
    for it in 1..=max_iters {
        let w = if tall { a.matvec(&v) } else { a.matvec_t(&v) };
        let sigma = norm2(&w);
        if sigma == 0.0 {
            return Ok((0.0, it));
        }
        let mut next = if tall { a.matvec_t(&w) } else { a.matvec(&w) };
        normalize(&mut next);
        v = next;
        if prev.is_finite() && fmath::abs(sigma - prev) <= tol * sigma.max(f64::MIN_POSITIVE) {
            stable += 1;
            if stable >= 2 {
                return Ok((sigma, it));
            }
        } else {
            stable = 0;
        }
        prev = sigma;
    }
    Err(Error::NonConvergence {
        best: prev,
        iterations: max_iters,
    })
}

/// Spectral radius (largest eigenvalue magnitude) of a square matrix.
///
/// Plain power iteration handles a dominant real eigenvalue; a dominant
/// complex pair makes the per-step growth ratio oscillate, so the iterate
/// triple `(x, Ax, A^2 x)` is also fitted to the two-term recurrence
/// `A^2 x = alpha Ax + beta x`, whose root magnitude is the radius.
pub fn spectral_radius(a: &Matrix, tol: f64, max_iters: usize) -> Result<f64> {
    if a.rows() != a.cols() {
        return Err(invalid_arg("spectral_radius: matrix must be square"));
    }
    if a.rows() == 0 {
        return Err(invalid_arg("spectral_radius: empty matrix"));
    }
    let mut x0 = start_vector(a.rows(), 0x52);
    let mut x1 = a.matvec(&x0);
    // r1, r2 are the growth factors x0 -> x1 -> x2; iterates stay unit norm.
    let mut r1 = normalize(&mut x1);
    if r1 == 0.0 {
        return Ok(0.0);
    }
    let mut prev_fit = f64::NAN;
    let mut stable_ratio = 0usize;
    let mut stable_fit = 0usize;
    let mut last_ratio = r1;
    for _it in 2..=max_iters {
        let mut x2 = a.matvec(&x1);
        let r2 = normalize(&mut x2);
        if r2 == 0.0 {
            return Ok(0.0);
        }

        // Simple path: per-step growth ratio (dominant real eigenvalue).
        if fmath::abs(r2 - last_ratio) <= tol * r2.max(f64::MIN_POSITIVE) {
            stable_ratio += 1;
            if stable_ratio >= 2 {
                return Ok(r2);
            }
        } else {
            stable_ratio = 0;
        }
        last_ratio = r2;

        // Two-step recurrence fit: least-squares (alpha, beta) in
        // A^2 x0 = alpha (A x0) + beta x0, with A x0 = r1 x1 and
        // A^2 x0 = r1 r2 x2. The dominant eigenvalue pair solves
        // lambda^2 = alpha lambda + beta.
        let c01 = dot(&x1, &x0);
        let denom = 1.0 - c01 * c01;
        if denom > 1e-12 {
            let c12 = dot(&x2, &x1);
            let c02 = dot(&x2, &x0);
            let alpha = r2 * (c12 - c01 * c02) / denom;
            let beta = r1 * r2 * (c02 - c01 * c12) / denom;
            let disc = alpha * alpha + 4.0 * beta;
            let rho_fit = if disc >= 0.0 {
                let s = fmath::sqrt(disc);
                (fmath::abs(alpha + s).max(fmath::abs(alpha - s))) / 2.0
            } else {
                fmath::sqrt(-beta)
            };
            if rho_fit.is_finite() && rho_fit > 0.0 {
                if prev_fit.is_finite()
                    && fmath::abs(rho_fit - prev_fit) <= tol * rho_fit.max(f64::MIN_POSITIVE)
                {
                    stable_fit += 1;
                    if stable_fit >= 2 {
                        return Ok(rho_fit);
                    }
                } else {
                    stable_fit = 0;
                }
                prev_fit = rho_fit;
            }
        }

        x0 = x1;
        x1 = x2;
        r1 = r2;
    }
    let best = if prev_fit.is_finite() { prev_fit } else { last_ratio };
    Err(Error::NonConvergence {
        best,
        iterations: max_iters,
    })
}

/// Rescales `a` so its spectral radius equals `target` (no-op direction:
/// returns the scaled copy).
pub fn rescale_to_radius(a: &Matrix, target: f64, tol: f64, max_iters: usize) -> Result<Matrix> {
    let rho = spectral_radius(a, tol, max_iters)?;
    if rho == 0.0 {
        return Err(invalid_arg("rescale_to_radius: zero spectral radius"));
    }
    Ok(a.scale(target / rho))
}

/// Random square matrix with roughly `density * n^2` nonzeros drawn uniform
/// on [-1, 1], rescaled to the requested spectral radius.
///
/// A degenerate draw (zero radius) is retried on the next substream; after
/// eight failed attempts an error is returned.
pub fn sparse_random_matrix(
    n: usize,
    density: f64,
    target_rho: f64,
    rng: &RngStream,
) -> Result<Matrix> {
    if n == 0 {
        return Err(invalid_arg("sparse_random_matrix: n must be >= 1"));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(invalid_arg("sparse_random_matrix: density must be in (0, 1]"));
    }
    for attempt in 0..8 {
        let mut r = rng.substream(attempt);
        let mut m = Matrix::zeros(n, n);
        for v in m.data_mut().iter_mut() {
            // Draw both values unconditionally so the consumed stream length
            // is independent of the mask outcome.
            let keep = r.bernoulli(density);
            let val = r.uniform(-1.0, 1.0);
            if keep {
                *v = val;
            }
        }
        match spectral_radius(&m, 1e-12, 100_000) {
            Ok(rho) if rho > 0.0 => {
                m.scale_mut(target_rho / rho);
                return Ok(m);
            }
            Ok(_) => continue,
            Err(Error::NonConvergence { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(invalid_arg(
        "sparse_random_matrix: no usable draw in 8 attempts",
    ))
}

// ── Householder QR (thin Q) ────────────────────────────────────────────

/// Orthonormal basis of the column span of `a` (thin Q of a Householder QR).
pub fn qr_q(a: &Matrix) -> Matrix {
    let m = a.rows();
    let n = a.cols();
    let k = n.min(m);
    let mut r = a.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        // Householder vector for column j below the diagonal.
        let mut v = vec![0.0; m - j];
        for i in j..m {
            v[i - j] = r.get(i, j);
        }
        let alpha = -v[0].signum() * norm2(&v);
        if alpha == 0.0 {
            vs.push(vec![0.0; m - j]);
            continue;
        }
        v[0] -= alpha;
        let vnorm = norm2(&v);
        if vnorm == 0.0 {
            vs.push(vec![0.0; m - j]);
            continue;
        }
        for x in &mut v {
            *x /= vnorm;
        }
        // Apply H = I - 2 v v^T to the remaining columns.
        for c in j..n {
            let mut proj = 0.0;
            for i in j..m {
                proj += v[i - j] * r.get(i, c);
            }
            for i in j..m {
                let val = r.get(i, c) - 2.0 * proj * v[i - j];
                r.set(i, c, val);
            }
        }
        vs.push(v);
    }
    // Q = H_0 H_1 ... H_{k-1} applied to the first k columns of I.
    let mut q = Matrix::zeros(m, k);
    for j in 0..k {
        q.set(j, j, 1.0);
    }
    for j in (0..k).rev() {
        let v = &vs[j];
        if v.iter().all(|&x| x == 0.0) {
            continue;
        }
        for c in 0..k {
            let mut proj = 0.0;
            for i in j..m {
                proj += v[i - j] * q.get(i, c);
            }
            for i in j..m {
                let val = q.get(i, c) - 2.0 * proj * v[i - j];
                q.set(i, c, val);
            }
        }
    }
    q
}

// ── symmetric eigendecomposition (cyclic Jacobi) ───────────────────────

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns eigenvalues in descending order with matching eigenvector
/// columns.
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows() != a.cols() {
        return Err(invalid_arg("sym_eig: matrix must be square"));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let eps = 1e-14 * m.frob_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        if fmath::sqrt(2.0 * off) <= eps {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if fmath::abs(apq) <= eps / (n as f64) {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (fmath::abs(theta) + fmath::sqrt(theta * theta + 1.0));
                let c = 1.0 / fmath::sqrt(t * t + 1.0);
                let s = t * c;
                for i in 0..n {
                    let mip = m.get(i, p);
                    let miq = m.get(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for j in 0..n {
                    let mpj = m.get(p, j);
                    let mqj = m.get(q, j);
                    m.set(p, j, c * mpj - s * mqj);
                    m.set(q, j, s * mpj + c * mqj);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m.get(j, j)
            .partial_cmp(&m.get(i, i))
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let eigvals: Vec<f64> = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vectors.set(i, new_j, v.get(i, old_j));
        }
    }
    Ok((eigvals, vectors))
}

/// All singular values of `a` (descending) through the Gram-matrix route.
pub fn svd_values_gram(a: &Matrix) -> Result<Vec<f64>> {
    let gram = if a.rows() >= a.cols() {
        a.matmul_tn(a) // A^T A
    } else {
        a.matmul_nt(a) // A A^T
    };
    let (eig, _) = sym_eig(&gram)?;
    Ok(eig.into_iter().map(|l| fmath::sqrt(l.max(0.0))).collect())
}

// ── truncated randomized SVD ───────────────────────────────────────────

/// Top-`m` singular values (descending) via the randomized range finder
/// with `oversample` extra columns and `power_iters` subspace iterations.
pub fn truncated_randomized_svd(
    a: &Matrix,
    m: usize,
    oversample: usize,
    power_iters: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let min_dim = a.rows().min(a.cols());
    if m == 0 {
        return Err(invalid_arg("truncated_randomized_svd: m must be >= 1"));
    }
    if m > min_dim {
        return Err(invalid_arg(
            "truncated_randomized_svd: m exceeds min(rows, cols)",
        ));
    }
    let k = (m + oversample).min(min_dim);
    let omega = Matrix::from_fn(a.cols(), k, |_, _| rng.normal());
    let mut q = qr_q(&a.matmul(&omega));
    for _ in 0..power_iters {
        let z = qr_q(&a.matmul_tn(&q)); // A^T Q
        q = qr_q(&a.matmul(&z));
    }
    let b = q.matmul_tn(a); // Q^T A, k x cols
    let gram = b.matmul_nt(&b); // B B^T, k x k
    let (eig, _) = sym_eig(&gram)?;
    Ok(eig
        .into_iter()
        .take(m)
        .map(|l| fmath::sqrt(l.max(0.0)))
        .collect())
}

/// Largest singular value by the dispatch rule used for FTMLE: full SVD
/// (Gram + Jacobi) when the smaller dimension is at most
/// [`FULL_SVD_LIMIT`], truncated randomized SVD with `m` candidates above.
pub fn sigma_max_auto(a: &Matrix, m: usize, rng: &mut RngStream) -> Result<f64> {
    if a.rows().min(a.cols()) <= FULL_SVD_LIMIT {
        let vals = svd_values_gram(a)?;
        Ok(vals[0])
    } else {
        let vals = truncated_randomized_svd(a, m, RSVD_OVERSAMPLE, RSVD_POWER_ITERS, rng)?;
        Ok(vals[0])
    }
}

// ── PCA ────────────────────────────────────────────────────────────────

pub struct Pca {
    /// features x k, orthonormal columns.
    pub components: Matrix,
    /// samples x k.
    pub projections: Matrix,
    /// Descending; zero for directions beyond the data rank.
    pub explained_variance: Vec<f64>,
}

/// PCA of `x` (samples x features): centers columns (no feature scaling),
/// eigendecomposes the covariance, projects onto the top `k` components.
pub fn pca(x: &Matrix, k: usize) -> Result<Pca> {
    if x.rows() < 2 {
        return Err(invalid_arg("pca: need at least 2 samples"));
    }
    if k > x.cols() {
        return Err(invalid_arg("pca: k exceeds feature count"));
    }
    let n = x.rows();
    let d = x.cols();
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in means.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut centered = x.clone();
    for i in 0..n {
        for (v, &m) in centered.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    let mut cov = centered.matmul_tn(&centered);
    cov.scale_mut(1.0 / (n as f64 - 1.0));
    let (eig, vectors) = sym_eig(&cov)?;
    let mut components = Matrix::zeros(d, k);
    for j in 0..k {
        for i in 0..d {
            components.set(i, j, vectors.get(i, j));
        }
    }
    let projections = centered.matmul(&components);
    let explained_variance = eig.into_iter().take(k).map(|l| l.max(0.0)).collect();
    Ok(Pca {
        components,
        projections,
        explained_variance,
    })
}
