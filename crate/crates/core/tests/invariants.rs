//! Cross-module invariants at desk-test scale: the qualitative laws the
//! reservoir models are built around, exercised on small instances.

use chaosdnn_core::autodiff::LossKind;
use chaosdnn_core::data::{synth_2d, Dataset, SynthKind};
use chaosdnn_core::dynamics::Lorenz96System;
use chaosdnn_core::lyapunov::{ftmle_discrete_matfree, mle_benettin, mle_benettin_discrete};
use chaosdnn_core::models::{accuracy, Backbone, ChaosModel, LinearModel, Model};
use chaosdnn_core::training::{train, TrainConfig};
use chaosdnn_core::{Matrix, RngStream};

#[test]
fn ffesn_contraction_law_small_scale() {
    // A non-chaotic reservoir (rho = 0.6) iterated for 15 steps shrinks
    // almost every state; check over 100 random inputs at N = 50.
    let rng = RngStream::new(2001, 0);
    let model = ChaosModel::ffesn(20, 50, 0.6, 0.5, 15, 10, &rng).unwrap();
    let sys = match &model.stages[0] {
        Backbone::Discrete { system, .. } => system,
        _ => unreachable!(),
    };
    let mut r = RngStream::new(2002, 0);
    let mut contracted = 0;
    let n_samples = 100;
    for _ in 0..n_samples {
        let u: Vec<f64> = (0..20).map(|_| r.uniform(0.0, 1.0)).collect();
        let x0 = Matrix::row_vector(&u).matmul(&model.read_in.w);
        let mut x = x0.row(0).to_vec();
        for _ in 0..15 {
            x = sys.step(&x);
        }
        let n0: f64 = x0.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nt < n0 {
            contracted += 1;
        }
    }
    assert!(
        contracted as f64 / n_samples as f64 >= 0.99,
        "only {contracted}/{n_samples} contracted"
    );
}

#[test]
fn ftmle_converges_to_mle_with_horizon() {
    // rho = 1.8 reservoir: the FTMLE distribution at T = 50 sits closer
    // to the asymptotic exponent than at T = 5.
    let rng = RngStream::new(2010, 0);
    let model = ChaosModel::ffesn(20, 60, 1.8, 0.5, 1, 10, &rng).unwrap();
    let sys = match &model.stages[0] {
        Backbone::Discrete { system, .. } => system.clone(),
        _ => unreachable!(),
    };
    let mut r = RngStream::new(2011, 0);
    let warm: Vec<f64> = (0..60).map(|_| r.uniform(-1.0, 1.0)).collect();
    let mle = mle_benettin_discrete(&sys, &warm, 4000, 1, 0.2).unwrap();
    let n_inputs = 40;
    let mut mean5 = 0.0;
    let mut mean50 = 0.0;
    for _ in 0..n_inputs {
        let u: Vec<f64> = (0..20).map(|_| r.uniform(0.0, 1.0)).collect();
        let x0 = Matrix::row_vector(&u).matmul(&model.read_in.w).row(0).to_vec();
        mean5 += ftmle_discrete_matfree(&sys, &x0, 5).unwrap() / n_inputs as f64;
        mean50 += ftmle_discrete_matfree(&sys, &x0, 50).unwrap() / n_inputs as f64;
    }
    assert!(
        (mean50 - mle).abs() < (mean5 - mle).abs(),
        "T=50 mean {mean50}, T=5 mean {mean5}, MLE {mle}"
    );
}

#[test]
fn lorenz96_mle_signs_across_forcing() {
    // Benettin's own signs at the two forcing values the models use:
    // F = 0.5 decays to a fixed point, F = 5 is chaotic. N = 500.
    let n = 500;
    let mut r = RngStream::new(2020, 0);
    let x0: Vec<f64> = (0..n).map(|_| r.uniform(-1.0, 1.0)).collect();
    let low = Lorenz96System::new(0.5, n).unwrap();
    let mle_low = mle_benettin(&low, &x0, 100.0, 1.0, 0.01, 0.2).unwrap();
    let high = Lorenz96System::new(5.0, n).unwrap();
    let mle_high = mle_benettin(&high, &x0, 100.0, 1.0, 0.01, 0.2).unwrap();
    assert!(mle_low < 0.0, "F=0.5 should contract, got {mle_low}");
    assert!(mle_high > 0.0, "F=5 should be chaotic, got {mle_high}");
}

#[test]
fn clusters_generator_is_linearly_separable() {
    let (train_set, _grid) = synth_2d(SynthKind::Clusters, 600, 100, 77).unwrap();
    let mut model = Model::Linear(LinearModel::new(2, 3, &RngStream::new(2030, 0)));
    let mut config = TrainConfig::ffesn_default(2031);
    config.learning_rate = 0.5;
    config.max_epochs = 80;
    let test_copy = Dataset::new(
        train_set.inputs.clone(),
        train_set.labels.clone(),
        3,
        "copy".into(),
    )
    .unwrap();
    train(&mut model, &train_set, &test_copy, &config).unwrap();
    let acc = accuracy(&model, &train_set.inputs, &train_set.labels, 256).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn readout_gradient_is_linear_in_upstream() {
    // Doubling all logits' upstream error doubles d_w_out exactly: use the
    // MSE loss where scaling targets by a factor scales the gradient.
    let rng = RngStream::new(2040, 0);
    let model = ChaosModel::ffesn(6, 8, 1.1, 0.5, 2, 4, &rng).unwrap();
    let mut r = RngStream::new(2041, 0);
    let x = Matrix::from_fn(3, 6, |_, _| r.uniform(0.0, 1.0));
    let y = vec![0u8, 1, 2];
    let (_, g1) = model.loss_grads(&x, &y, LossKind::Mse).unwrap();
    // MSE gradient dz = 2(z - t)/B; replacing z by t + 2(z - t) doubles it.
    // Equivalent check with the public surface: batch duplication halves
    // the per-sample weight, so concatenating the batch with itself leaves
    // d_w_out unchanged while summing two copies would double it.
    let idx: Vec<usize> = (0..3).chain(0..3).collect();
    let x2 = x.select_rows(&idx);
    let y2 = vec![0u8, 1, 2, 0, 1, 2];
    let (_, g2) = model.loss_grads(&x2, &y2, LossKind::Mse).unwrap();
    let rel = g1.d_w_out.sub(&g2.d_w_out).frob_norm() / g1.d_w_out.frob_norm();
    assert!(rel < 1e-12, "mean-reduction linearity violated: {rel}");
}
