//! Cross-checks of the spectral and tangent machinery against the
//! independent brute-force oracles.

use chaosdnn_core::dynamics::{
    integrate_rk4, tangent_propagate, AffineSystem, Lorenz96System, VectorField,
};
use chaosdnn_core::linalg::{
    max_singular_value, pca, rescale_to_radius, spectral_radius, truncated_randomized_svd,
    RSVD_OVERSAMPLE, RSVD_POWER_ITERS,
};
use chaosdnn_core::lyapunov::ftmle_system;
use chaosdnn_core::{Matrix, RngStream};
use chaosdnn_oracles::{central_jacobian, eig_moduli, expm, jacobi_svd_values, perturbation_ftmle};

#[test]
fn sigma_max_matches_jacobi_svd_on_random_50x50() {
    let mut rng = RngStream::new(1001, 0);
    let a = Matrix::from_fn(50, 50, |_, _| rng.uniform(-1.0, 1.0));
    let oracle = jacobi_svd_values(&a)[0];
    let (sigma, _) = max_singular_value(&a, 1e-12, 200_000).unwrap();
    assert!(
        (sigma - oracle).abs() / oracle < 1e-8,
        "{sigma} vs oracle {oracle}"
    );
}

#[test]
fn rsvd_top5_matches_jacobi_svd_on_random_200x300() {
    // Random 200x300 matrix with a decaying spectrum (the randomized
    // route's accuracy contract assumes a spectral gap of at least 1.1;
    // an iid matrix's quarter-circle bulk has none).
    let mut rng = RngStream::new(1002, 0);
    let g1 = Matrix::from_fn(200, 30, |_, _| rng.normal());
    let g2 = Matrix::from_fn(300, 30, |_, _| rng.normal());
    let q1 = chaosdnn_core::linalg::qr_q(&g1);
    let q2 = chaosdnn_core::linalg::qr_q(&g2);
    let mut decay = vec![0.0; 30];
    let mut s = 10.0;
    for d in decay.iter_mut() {
        *d = s;
        s *= 0.7;
    }
    let a = q1.matmul(&Matrix::from_diag(&decay)).matmul_nt(&q2);
    let oracle = jacobi_svd_values(&a);
    let mut seed = RngStream::new(1003, 0);
    let vals =
        truncated_randomized_svd(&a, 5, RSVD_OVERSAMPLE, RSVD_POWER_ITERS, &mut seed).unwrap();
    for (i, (v, o)) in vals.iter().zip(&oracle[..5]).enumerate() {
        assert!((v - o).abs() / o < 1e-4, "sigma_{i}: {v} vs oracle {o}");
    }
}

#[test]
fn rsvd_full_rank_equals_oracle_on_small_matrices() {
    // With m = min(rows, cols) the randomized route must match the full
    // decomposition on small matrices.
    for (rows, cols, seed) in [(8usize, 12usize, 1u64), (15, 15, 2), (20, 9, 3)] {
        let mut rng = RngStream::new(1004 + seed, 0);
        let a = Matrix::from_fn(rows, cols, |_, _| rng.uniform(-2.0, 2.0));
        let m = rows.min(cols);
        let oracle = jacobi_svd_values(&a);
        let mut seed_rng = RngStream::new(2000 + seed, 0);
        let vals =
            truncated_randomized_svd(&a, m, RSVD_OVERSAMPLE, RSVD_POWER_ITERS, &mut seed_rng)
                .unwrap();
        for (v, o) in vals.iter().zip(&oracle[..m]) {
            assert!((v - o).abs() < 1e-6 * o.max(1.0), "{v} vs {o}");
        }
    }
}

#[test]
fn spectral_radius_matches_qr_eig_after_rescale() {
    let rng = RngStream::new(1010, 0);
    let m = chaosdnn_core::linalg::sparse_random_matrix(100, 0.5, 1.0, &rng).unwrap();
    let rescaled = rescale_to_radius(&m, 1.4, 1e-12, 200_000).unwrap();
    let oracle = eig_moduli(&rescaled)[0];
    assert!(
        (oracle - 1.4).abs() < 1e-8,
        "QR-iteration oracle sees rho = {oracle}"
    );
    let rho = spectral_radius(&rescaled, 1e-12, 200_000).unwrap();
    assert!((rho - 1.4).abs() < 1e-8, "power iteration sees rho = {rho}");
}

#[test]
fn tangent_propagate_linear_field_matches_matrix_exponential() {
    let mut rng = RngStream::new(1020, 0);
    let a = Matrix::from_fn(8, 8, |_, _| rng.uniform(-0.8, 0.8));
    let sys = AffineSystem::new(a.clone(), vec![0.0; 8]).unwrap();
    let t = 1.3;
    let j = tangent_propagate(&sys, &vec![0.0; 8], t, 0.001).unwrap();
    let expect = expm(&a.scale(t));
    let rel = j.sub(&expect).frob_norm() / expect.frob_norm();
    assert!(rel < 1e-6, "relative error vs expm oracle: {rel}");
}

#[test]
fn lorenz_jacobian_matches_finite_differences() {
    let sys = Lorenz96System::new(5.0, 10).unwrap();
    let mut rng = RngStream::new(1030, 0);
    let x: Vec<f64> = (0..10).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let analytic = sys.jacobian(&x);
    let f = |y: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; 10];
        sys.field(y, &mut out);
        out
    };
    let fd = central_jacobian(&f, &x, 1e-5);
    for i in 0..10 {
        for j in 0..10 {
            let a = analytic.get(i, j);
            let b = fd.get(i, j);
            assert!((a - b).abs() < 1e-4 * a.abs().max(1.0), "({i},{j}): {a} vs {b}");
        }
    }
}

#[test]
fn lorenz_flow_jacobian_matches_finite_differences() {
    // Full finite-difference Jacobian of the T = 0.5 flow map.
    let sys = Lorenz96System::new(5.0, 10).unwrap();
    let mut rng = RngStream::new(1031, 0);
    let x0: Vec<f64> = (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let j = tangent_propagate(&sys, &x0, 0.5, 0.01).unwrap();
    let flow = |y: &[f64]| -> Vec<f64> {
        integrate_rk4(&sys, y, 0.5, 0.01)
            .unwrap()
            .final_state()
            .to_vec()
    };
    let fd = central_jacobian(&flow, &x0, 1e-5);
    let rel = j.sub(&fd).frob_norm() / fd.frob_norm();
    assert!(rel < 1e-4, "flow Jacobian relative error {rel}");
}

#[test]
fn ftmle_matches_perturbation_growth_oracle_on_lorenz() {
    // N = 10, F = 5, T = 2: analytic FTMLE vs the best perturbation
    // direction found by random search, within 5e-3.
    let sys = Lorenz96System::new(5.0, 10).unwrap();
    let mut rng = RngStream::new(1040, 0);
    // Start from a point on the attractor.
    let warm: Vec<f64> = (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let x0 = integrate_rk4(&sys, &warm, 20.0, 0.01)
        .unwrap()
        .final_state()
        .to_vec();
    let t = 2.0;
    let analytic = ftmle_system(&sys, &x0, t, 0.01).unwrap();
    let flow = |y: &[f64]| -> Vec<f64> {
        integrate_rk4(&sys, y, t, 0.01)
            .unwrap()
            .final_state()
            .to_vec()
    };
    let oracle = perturbation_ftmle(&flow, &x0, t, 1e-7);
    assert!(
        (analytic - oracle).abs() < 5e-3,
        "analytic {analytic} vs perturbation oracle {oracle}"
    );
    // Random directions can only undershoot the worst-case growth.
    let mut dir_rng = RngStream::new(1041, 0);
    let lower =
        chaosdnn_oracles::perturbation_ftmle_random(&flow, &x0, t, 1e-7, 50, &mut dir_rng);
    assert!(lower <= analytic + 5e-3, "random-direction bound violated");
}

#[test]
fn pca_projections_match_external_composition() {
    // projections == centered data times components, recomputed here.
    let mut rng = RngStream::new(1050, 0);
    let x = Matrix::from_fn(40, 6, |_, _| rng.uniform(-1.0, 1.0));
    let p = pca(&x, 3).unwrap();
    let n = x.rows();
    let mut means = vec![0.0; 6];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered = Matrix::from_fn(n, 6, |i, j| x.get(i, j) - means[j]);
    let expect = centered.matmul(&p.components);
    let rel = p.projections.sub(&expect).frob_norm() / expect.frob_norm().max(1e-12);
    assert!(rel < 1e-12);
}
