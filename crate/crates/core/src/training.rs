//! SGD-with-momentum training loop and the experiment metrics.
//!
//! One trainer owns one model (single writer). Everything is a
//! deterministic function of `(seed, config, data)`: the shuffle stream,
//! the batch order, and the reduction order are all fixed, so rerunning a
//! configuration reproduces its history bitwise.

use alloc::vec::Vec;

use crate::autodiff::LossKind;
use crate::data::Dataset;
use crate::error::{invalid_arg, Error, Result};
use crate::fmath;
use crate::matrix::Matrix;
use crate::models::{accuracy, MlpModel, Model};
use crate::rng::RngStream;

// ── configuration ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs.
    pub eval_every: usize,
    /// Tolerance used by the convergence-epoch metric.
    pub convergence_tol: f64,
    pub loss: LossKind,
    /// Record hidden-layer spectral radii every this many epochs
    /// (MLP models only).
    pub rho_cadence: Option<usize>,
    /// Stop early when the best test accuracy has not improved for this
    /// many epochs.
    pub patience: Option<usize>,
}

impl TrainConfig {
    /// Echo-state defaults: lr 5e-3, momentum 0.9, batch 64.
    pub fn ffesn_default(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            momentum: 0.9,
            batch_size: 64,
            max_epochs: 60,
            seed,
            eval_every: 1,
            convergence_tol: 5e-4,
            loss: LossKind::SoftmaxCrossEntropy,
            rho_cadence: None,
            patience: None,
        }
    }

    /// Initialization-study defaults: lr 1e-3, radius tracking on.
    pub fn mlp_init_study(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            max_epochs: 60,
            seed,
            eval_every: 1,
            convergence_tol: 5e-4,
            loss: LossKind::SoftmaxCrossEntropy,
            rho_cadence: Some(1),
            patience: None,
        }
    }
}

// ── history and metrics ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// `(epoch, per-hidden-layer spectral radius)` when tracking is on.
    pub rho_trace: Vec<(usize, Vec<f64>)>,
    pub best_acc: f64,
    pub best_epoch: usize,
    pub n_test: usize,
    /// Filled by callers that can measure time; the core stays clockless.
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub best_acc: f64,
    /// `1 - best_acc`; capped at `1/(2 n_test)` when zero so the log label
    /// stays finite.
    pub epsilon: f64,
    /// `|ln(epsilon)|`, natural log.
    pub log_label: f64,
    /// First epoch whose accuracy is within `tol` of the best.
    pub convergence_epoch: usize,
}

/// Accuracy-based metrics of one training run.
pub fn metric_suite(history: &TrainHistory, tol: f64) -> Result<MetricSummary> {
    if history.epochs.is_empty() {
        return Err(invalid_arg("metric_suite: empty history"));
    }
    let best_acc = history.best_acc;
    let mut epsilon = 1.0 - best_acc;
    if epsilon <= 0.0 {
        epsilon = 1.0 / (2.0 * history.n_test.max(1) as f64);
    }
    let log_label = fmath::abs(fmath::ln(epsilon));
    let convergence_epoch = history
        .epochs
        .iter()
        .find(|e| e.test_acc >= best_acc - tol)
        .map(|e| e.epoch)
        .expect("best accuracy is attained somewhere");
    Ok(MetricSummary {
        best_acc,
        epsilon,
        log_label,
        convergence_epoch,
    })
}

/// First epoch whose test loss satisfies
/// `(loss_t - loss_min) / loss_min <= alpha` (the convergence criterion of
/// the initialization study).
pub fn alpha_convergence_epoch(history: &TrainHistory, alpha: f64) -> Option<usize> {
    let loss_min = history
        .epochs
        .iter()
        .map(|e| e.test_loss)
        .fold(f64::INFINITY, f64::min);
    if !(loss_min > 0.0) || !loss_min.is_finite() {
        return None;
    }
    history
        .epochs
        .iter()
        .find(|e| (e.test_loss - loss_min) / loss_min <= alpha)
        .map(|e| e.epoch)
}

// ── optimizer ──────────────────────────────────────────────────────────

/// Classical heavy-ball step: `v <- momentum v - lr g; p <- p + v`.
pub fn sgd_momentum_step(
    params: &mut Matrix,
    grads: &Matrix,
    velocity: &mut Matrix,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.rows() != grads.rows()
        || params.cols() != grads.cols()
        || params.rows() != velocity.rows()
        || params.cols() != velocity.cols()
    {
        return Err(invalid_arg("sgd_momentum_step: shape mismatch"));
    }
    for ((p, g), v) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Momentum state aligned with a model's parameter list.
pub struct SgdMomentum {
    velocities: Vec<Matrix>,
    lr: f64,
    momentum: f64,
}

impl SgdMomentum {
    pub fn new(model: &Model, lr: f64, momentum: f64) -> Self {
        let velocities = model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        SgdMomentum {
            velocities,
            lr,
            momentum,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Matrix]) -> Result<()> {
        let params = model.params_mut();
        if params.len() != grads.len() || params.len() != self.velocities.len() {
            return Err(invalid_arg("SgdMomentum: parameter count mismatch"));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocities) {
            sgd_momentum_step(p, g, v, self.lr, self.momentum)?;
        }
        Ok(())
    }
}

// ── evaluation ─────────────────────────────────────────────────────────

/// Mean loss over a dataset, evaluated in chunks.
pub fn mean_loss(model: &Model, data: &Dataset, loss: LossKind, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let logits = model.forward_batch(&data.inputs.select_rows(&idx))?;
        let (l, _) = crate::autodiff::loss_with_grad(loss, &logits, &data.labels[start..end]);
        total += l * (end - start) as f64;
        start = end;
    }
    Ok(total / data.len() as f64)
}

// ── training loop ──────────────────────────────────────────────────────

/// Trains `model` on `train`, evaluating on `test`. Deterministic given
/// the seed; on return the model holds the parameters of its
/// best-accuracy epoch.
pub fn train(
    model: &mut Model,
    train_data: &Dataset,
    test_data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    if train_data.is_empty() || test_data.is_empty() {
        return Err(invalid_arg("train: empty split"));
    }
    if config.batch_size == 0 || config.max_epochs == 0 || config.eval_every == 0 {
        return Err(invalid_arg("train: counts must be positive"));
    }
    let shuffle_rng = RngStream::new(config.seed, 0x5FF1E);
    let mut optim = SgdMomentum::new(model, config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(config.max_epochs),
        rho_trace: Vec::new(),
        best_acc: f64::NEG_INFINITY,
        best_epoch: 0,
        n_test: test_data.len(),
        wall_seconds: None,
    };
    let mut best_params: Option<Vec<Matrix>> = None;

    if let Some(cadence) = config.rho_cadence {
        if cadence > 0 {
            if let Model::Mlp(mlp) = &*model {
                history.rho_trace.push((0, track_spectral_radius(mlp)?));
            }
        }
    }

    for epoch in 1..=config.max_epochs {
        let mut rng = shuffle_rng.substream(epoch as u64);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let x = train_data.inputs.select_rows(batch);
            let y: Vec<u8> = batch.iter().map(|&i| train_data.labels[i]).collect();
            let (loss, grads) = match model.loss_grads(&x, &y, config.loss) {
                Ok(r) => r,
                Err(Error::TrainingDiverged { .. }) | Err(Error::Divergence { .. }) => {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        batch: batch_idx,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            optim.step(model, &grads)?;
            epoch_loss += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = epoch_loss / seen as f64;

        if epoch % config.eval_every == 0 || epoch == config.max_epochs {
            let test_loss = mean_loss(model, test_data, config.loss, 512)?;
            let test_acc = accuracy(model, &test_data.inputs, &test_data.labels, 512)?;
            history.epochs.push(EpochStats {
                epoch,
                train_loss,
                test_loss,
                test_acc,
            });
            if test_acc > history.best_acc {
                history.best_acc = test_acc;
                history.best_epoch = epoch;
                best_params = Some(model.params().into_iter().cloned().collect());
            }
        }
        if let Some(cadence) = config.rho_cadence {
            if cadence > 0 && epoch % cadence == 0 {
                if let Model::Mlp(mlp) = &*model {
                    history.rho_trace.push((epoch, track_spectral_radius(mlp)?));
                }
            }
        }
        if let Some(patience) = config.patience {
            if history.best_acc.is_finite() && epoch >= history.best_epoch + patience {
                break;
            }
        }
    }

    // Restore the checkpointed best parameters.
    if let Some(best) = best_params {
        for (p, saved) in model.params_mut().into_iter().zip(best) {
            *p = saved;
        }
    }
    Ok(history)
}

/// Spectral radius of each hidden weight matrix of an MLP; recorded by the
/// training loop at the configured cadence.
pub fn track_spectral_radius(mlp: &MlpModel) -> Result<Vec<f64>> {
    mlp.hidden_spectral_radii()
}
