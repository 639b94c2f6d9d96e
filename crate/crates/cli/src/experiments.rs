//! Experiment drivers shared by the CLI subcommands: single training
//! runs, backbone FTMLE evaluation, bifurcation/MLE scans, PCA exports,
//! and the noise-robustness study.

use std::path::Path;
use std::time::Instant;

use chaosdnn_core::autodiff::{
    affine_forward, norm_triplets_forward, BatchTrajectory,
};
use chaosdnn_core::data::{
    inject_noise, state_variance, Dataset, NoiseKind, NoiseSpec,
};
use chaosdnn_core::dynamics::{
    integrate_rk4, AffineSystem, CoupledStoSystem, Lorenz96System, StoParams, VectorField,
};
use chaosdnn_core::linalg::pca;
use chaosdnn_core::lyapunov::{
    ftmle_discrete_batch, ftmle_model_layers, ftmle_model_overall, ftmle_system_matfree,
    lyapunov_time, mle_benettin, mle_benettin_discrete, LayeredModel,
};
use chaosdnn_core::models::{accuracy, Backbone, ChaosModel, Model};
use chaosdnn_core::training::{metric_suite, train, MetricSummary, TrainHistory};
use chaosdnn_core::{Matrix, RngStream};

use crate::config::ExperimentConfig;
use crate::csvio::write_csv;
use crate::{CliError, Result};

// ── single training run ────────────────────────────────────────────────

pub struct RunOutcome {
    pub model: Model,
    pub history: TrainHistory,
    pub metrics: MetricSummary,
}

/// Builds and trains one model per the config; the returned history has
/// its wall time filled in.
pub fn train_once(
    config: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    stream: u64,
) -> Result<RunOutcome> {
    let rng = RngStream::new(config.seed, stream);
    let mut model = config.model.build(train_set.features(), &rng)?;
    let mut tc = config.train.to_train_config(config.seed ^ stream.rotate_left(17))?;
    if let (Some(_), chaosdnn_core::models::Model::Mlp(_)) = (config.train.patience, &model) {
        // patience carries over as-is
    }
    tc.rho_cadence = if config.train.track_rho { Some(1) } else { None };
    let started = Instant::now();
    let mut history = train(&mut model, train_set, test_set, &tc)?;
    history.wall_seconds = Some(started.elapsed().as_secs_f64());
    let metrics = metric_suite(&history, tc.convergence_tol)?;
    Ok(RunOutcome {
        model,
        history,
        metrics,
    })
}

/// Writes a history as `history.csv` (epoch, train_loss, test_loss,
/// test_acc) plus optional spectral-radius columns file.
pub fn write_history(dir: &Path, history: &TrainHistory) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                format!("{}", e.train_loss),
                format!("{}", e.test_loss),
                format!("{}", e.test_acc),
            ]
        })
        .collect();
    write_csv(
        &dir.join("history.csv"),
        &["epoch", "train_loss", "test_loss", "test_acc"],
        &rows,
    )?;
    if !history.rho_trace.is_empty() {
        let layers = history.rho_trace[0].1.len();
        let header: Vec<String> = std::iter::once("epoch".to_string())
            .chain((0..layers).map(|i| format!("rho_hidden{}", i + 1)))
            .collect();
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let rows: Vec<Vec<String>> = history
            .rho_trace
            .iter()
            .map(|(e, radii)| {
                std::iter::once(e.to_string())
                    .chain(radii.iter().map(|r| format!("{r}")))
                    .collect()
            })
            .collect();
        write_csv(&dir.join("spectral_radius.csv"), &header_refs, &rows)?;
    }
    Ok(())
}

// ── backbone FTMLE over a test subsample ───────────────────────────────

/// Backbone inputs (read-in outputs, normalized where the model does) for
/// a batch of raw inputs.
pub fn backbone_inputs(model: &ChaosModel, inputs: &Matrix) -> Result<Matrix> {
    let mut x = inputs.clone();
    if let Some(conv) = &model.frontend {
        let (_a, pooled) = {
            // Conv2d::forward is private to the models module; replicate
            // through the public pieces.
            let z = chaosdnn_core::autodiff::conv_forward(&x, &conv.kernel, &conv.bias, conv.shape);
            let a = chaosdnn_core::autodiff::tanh_forward(&z);
            let pooled = chaosdnn_core::autodiff::avgpool_forward(&a, conv.shape);
            (a, pooled)
        };
        x = pooled;
    }
    x = affine_forward(&x, &model.read_in.w, model.read_in.b.as_ref());
    if model.input_norm {
        x = norm_triplets_forward(&x)?;
    }
    Ok(x)
}

/// Mean FTMLE of the first backbone stage over (up to) `limit` rows of
/// `inputs`, through the trained read-in. Non-backbone models return
/// `None`.
pub fn backbone_mean_ftmle(model: &Model, inputs: &Matrix, limit: usize) -> Result<Option<f64>> {
    let chaos = match model {
        Model::Chaos(c) => c,
        _ => return Ok(None),
    };
    let n = inputs.rows().min(limit);
    let idx: Vec<usize> = (0..n).collect();
    let states = backbone_inputs(chaos, &inputs.select_rows(&idx))?;
    match &chaos.stages[0] {
        Backbone::Discrete { system, steps } => {
            if *steps == 0 {
                return Ok(Some(0.0));
            }
            let lambdas = ftmle_discrete_batch(system, &states, *steps)?;
            Ok(Some(lambdas.iter().sum::<f64>() / lambdas.len() as f64))
        }
        stage => {
            let (field, horizon, dt) = stage.as_field().expect("continuous");
            if horizon == 0.0 {
                return Ok(Some(0.0));
            }
            let mut acc = 0.0;
            for i in 0..n {
                acc += ftmle_system_matfree(field, states.row(i), horizon, dt)?;
            }
            Ok(Some(acc / n as f64))
        }
    }
}

// ── FTMLE report ───────────────────────────────────────────────────────

pub struct FtmleCsv {
    pub rows: Vec<Vec<String>>,
    /// `(x, y, lambda)` map rows when the model input is 2-D.
    pub map_rows: Vec<Vec<String>>,
}

/// Per-sample FTMLE of the overall model and each layer over (up to)
/// `samples` rows of `inputs`; `map_inputs` (a 2-D grid) additionally
/// yields `(x, y, lambda)` map rows from the overall exponent.
pub fn ftmle_report(
    model: &Model,
    inputs: &Matrix,
    samples: usize,
    map_inputs: Option<&Matrix>,
) -> Result<FtmleCsv> {
    let n = inputs.rows().min(samples);
    let mut rows = Vec::new();
    let layer_names: Vec<String> = (0..model.layer_count())
        .map(|l| model.layer_name(l))
        .collect();
    for s in 0..n {
        let input = inputs.row(s);
        let overall = ftmle_model_overall(model, input, 5)?;
        rows.push(vec![s.to_string(), "overall".into(), format!("{overall}")]);
        for (l, lam) in ftmle_model_layers(model, input, 5)?.into_iter().enumerate() {
            rows.push(vec![s.to_string(), layer_names[l].clone(), format!("{lam}")]);
        }
    }
    let mut map_rows = Vec::new();
    if let Some(grid) = map_inputs {
        for s in 0..grid.rows() {
            let input = grid.row(s);
            let overall = ftmle_model_overall(model, input, 5)?;
            map_rows.push(vec![
                format!("{}", input[0]),
                format!("{}", input[1]),
                format!("{overall}"),
            ]);
        }
    }
    Ok(FtmleCsv { rows, map_rows })
}

// ── bifurcation / MLE scans ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanFamily {
    /// Lorenz-96 over the forcing term.
    Lorenz96,
    /// Coupled STOs over the coupling magnitude (Oe); times in seconds.
    Csto,
    /// The linear relaxation `dx/dt = -x + F`; closed-form check family.
    Relax,
}

impl ScanFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lorenz96" => Ok(ScanFamily::Lorenz96),
            "csto" => Ok(ScanFamily::Csto),
            "relax" => Ok(ScanFamily::Relax),
            other => Err(CliError::Config(format!("unknown scan system '{other}'"))),
        }
    }
}

pub struct ScanPoint {
    pub param: f64,
    /// Local extrema of the representative coordinate over the final
    /// quarter of the scan trajectory.
    pub extrema: Vec<f64>,
    pub mle: f64,
    pub status: &'static str,
}

pub struct ScanSettings {
    pub dim: usize,
    /// Trajectory time for the scatter section.
    pub horizon: f64,
    pub dt: f64,
    /// Benettin settings.
    pub mle_time: f64,
    pub renorm: f64,
    pub seed: u64,
}

impl ScanSettings {
    pub fn defaults(family: ScanFamily) -> Self {
        match family {
            ScanFamily::Lorenz96 => ScanSettings {
                dim: 500,
                horizon: 20.0,
                dt: 0.01,
                mle_time: 100.0,
                renorm: 1.0,
                seed: 1,
            },
            ScanFamily::Csto => ScanSettings {
                dim: 200, // oscillators
                horizon: 20e-9,
                dt: 1e-12,
                mle_time: 100e-9,
                renorm: 100e-12,
                seed: 1,
            },
            ScanFamily::Relax => ScanSettings {
                dim: 1,
                horizon: 20.0,
                dt: 0.01,
                mle_time: 50.0,
                renorm: 1.0,
                seed: 1,
            },
        }
    }
}

fn final_quarter_extrema(values: &[f64], cap: usize) -> Vec<f64> {
    let start = values.len() * 3 / 4;
    let window = &values[start..];
    let mut out = Vec::new();
    for i in 1..window.len().saturating_sub(1) {
        let (a, b, c) = (window[i - 1], window[i], window[i + 1]);
        if (b > a && b >= c) || (b < a && b <= c) {
            out.push(b);
        }
    }
    if out.is_empty() {
        if let Some(last) = window.last() {
            out.push(*last);
        }
    }
    if out.len() > cap {
        let step = out.len() / cap;
        out = out.iter().step_by(step.max(1)).cloned().take(cap).collect();
    }
    out
}

fn scan_one(
    family: ScanFamily,
    param: f64,
    settings: &ScanSettings,
    rng: &RngStream,
) -> Result<ScanPoint> {
    let run = |field: &dyn VectorField, x0: &[f64], coord: usize| -> Result<(Vec<f64>, f64)> {
        let traj = integrate_rk4(field, x0, settings.horizon, settings.dt)?;
        let series: Vec<f64> = traj.states.iter().map(|s| s[coord]).collect();
        let mle = mle_benettin(
            field,
            traj.final_state(),
            settings.mle_time,
            settings.renorm,
            settings.dt,
            0.2,
        )?;
        Ok((series, mle))
    };
    let result = match family {
        ScanFamily::Lorenz96 => {
            let sys = Lorenz96System::new(param, settings.dim)?;
            let mut r = rng.clone();
            let x0: Vec<f64> = (0..settings.dim).map(|_| r.uniform(-1.0, 1.0)).collect();
            run(&sys, &x0, 0)
        }
        ScanFamily::Csto => {
            let w_cp = CoupledStoSystem::random_coupling(settings.dim, &rng.substream(0))?;
            let sys = CoupledStoSystem::new(StoParams::default(), param, w_cp)?;
            let mut r = rng.substream(1);
            let mut x0 = vec![0.0; 3 * settings.dim];
            for k in 0..settings.dim {
                let m = [r.normal(), r.normal(), r.normal()];
                let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                for d in 0..3 {
                    x0[3 * k + d] = m[d] / n;
                }
            }
            run(&sys, &x0, 0)
        }
        ScanFamily::Relax => {
            let sys = AffineSystem::new(Matrix::from_diag(&[-1.0]), vec![param])?;
            run(&sys, &[0.0], 0)
        }
    };
    Ok(match result {
        Ok((series, mle)) => ScanPoint {
            param,
            extrema: final_quarter_extrema(&series, 200),
            mle,
            status: "ok",
        },
        Err(CliError::Core(chaosdnn_core::Error::Divergence { .. })) => ScanPoint {
            param,
            extrema: Vec::new(),
            mle: f64::NAN,
            status: "diverged",
        },
        Err(e) => return Err(e),
    })
}

/// A representative trajectory of one scan family (for CSV export).
pub fn sample_trajectory(
    family: ScanFamily,
    param: f64,
    settings: &ScanSettings,
) -> Result<chaosdnn_core::dynamics::Trajectory> {
    let rng = RngStream::new(settings.seed, 0xB1F);
    match family {
        ScanFamily::Lorenz96 => {
            let sys = Lorenz96System::new(param, settings.dim)?;
            let mut r = rng.clone();
            let x0: Vec<f64> = (0..settings.dim).map(|_| r.uniform(-1.0, 1.0)).collect();
            Ok(integrate_rk4(&sys, &x0, settings.horizon, settings.dt)?)
        }
        ScanFamily::Csto => {
            let w_cp = CoupledStoSystem::random_coupling(settings.dim, &rng.substream(0))?;
            let sys = CoupledStoSystem::new(StoParams::default(), param, w_cp)?;
            let mut r = rng.substream(1);
            let mut x0 = vec![0.0; 3 * settings.dim];
            for k in 0..settings.dim {
                let m = [r.normal(), r.normal(), r.normal()];
                let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                for d in 0..3 {
                    x0[3 * k + d] = m[d] / n;
                }
            }
            Ok(integrate_rk4(&sys, &x0, settings.horizon, settings.dt)?)
        }
        ScanFamily::Relax => {
            let sys = AffineSystem::new(Matrix::from_diag(&[-1.0]), vec![param])?;
            Ok(integrate_rk4(&sys, &[0.0], settings.horizon, settings.dt)?)
        }
    }
}

/// Scatter + MLE scan across a parameter range.
pub fn bifurcation_scan(
    family: ScanFamily,
    params: &[f64],
    settings: &ScanSettings,
) -> Result<Vec<ScanPoint>> {
    let rng = RngStream::new(settings.seed, 0xB1F);
    params
        .iter()
        .map(|&p| scan_one(family, p, settings, &rng))
        .collect()
}

pub fn write_scan(dir: &Path, points: &[ScanPoint]) -> Result<()> {
    let mut scatter_rows = Vec::new();
    let mut mle_rows = Vec::new();
    for p in points {
        for e in &p.extrema {
            scatter_rows.push(vec![format!("{}", p.param), format!("{e}")]);
        }
        mle_rows.push(vec![
            format!("{}", p.param),
            format!("{}", p.mle),
            format!("{}", lyapunov_time(p.mle)),
            p.status.to_string(),
        ]);
    }
    write_csv(&dir.join("bifurcation.csv"), &["param", "extremum"], &scatter_rows)?;
    write_csv(
        &dir.join("mle.csv"),
        &["param", "mle", "lyapunov_time", "status"],
        &mle_rows,
    )?;
    Ok(())
}

/// Benettin MLE of one autonomous system at one parameter point.
pub fn mle_point(family: ScanFamily, param: f64, settings: &ScanSettings) -> Result<f64> {
    let rng = RngStream::new(settings.seed, 0xB1F);
    Ok(scan_one(family, param, settings, &rng)?.mle)
}

/// MLE of the autonomous reservoir map at a given spectral radius.
pub fn ffesn_mle(
    reservoir: usize,
    rho: f64,
    density: f64,
    seed: u64,
    steps: usize,
) -> Result<f64> {
    let rng = RngStream::new(seed, 0xFFE);
    let w = chaosdnn_core::linalg::sparse_random_matrix(reservoir, density, rho, &rng)?;
    let sys = chaosdnn_core::dynamics::DiscreteMapSystem::new(
        w,
        chaosdnn_core::dynamics::Activation::Tanh,
    )?;
    let mut r = rng.substream(1);
    let x0: Vec<f64> = (0..reservoir).map(|_| r.uniform(-1.0, 1.0)).collect();
    Ok(mle_benettin_discrete(&sys, &x0, steps, 1, 0.2)?)
}

// ── PCA export ─────────────────────────────────────────────────────────

pub struct PcaOutput {
    pub rows: Vec<Vec<String>>,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

/// PCA of the backbone states at the chosen stage over (up to) `samples`
/// inputs, labelled by class.
pub fn pca_states(
    model: &Model,
    data: &Dataset,
    final_stage: bool,
    samples: usize,
) -> Result<PcaOutput> {
    let chaos = match model {
        Model::Chaos(c) => c,
        _ => {
            return Err(CliError::Config(
                "pca requires a chaos-backbone checkpoint".into(),
            ))
        }
    };
    let n = data.len().min(samples);
    let idx: Vec<usize> = (0..n).collect();
    let initial = backbone_inputs(chaos, &data.inputs.select_rows(&idx))?;
    let states = if final_stage {
        let mut x = initial;
        for stage in &chaos.stages {
            x = match stage {
                Backbone::Discrete { system, steps } => {
                    let mut s = x;
                    for _ in 0..*steps {
                        s = system.step_batch(&s);
                    }
                    s
                }
                stage => {
                    let (field, horizon, dt) = stage.as_field().expect("continuous");
                    BatchTrajectory::integrate(field, &x, horizon, dt)?
                        .final_states()
                        .clone()
                }
            };
        }
        x
    } else {
        initial
    };
    let k = 2.min(states.cols());
    let p = pca(&states, k)?;
    let total_variance = {
        // Total variance of the states themselves (not just top-k).
        let full = pca(&states, states.cols().min(states.rows().saturating_sub(1)))?;
        full.explained_variance.iter().sum()
    };
    let rows = (0..n)
        .map(|i| {
            vec![
                i.to_string(),
                format!("{}", p.projections.get(i, 0)),
                format!("{}", if k > 1 { p.projections.get(i, 1) } else { 0.0 }),
                data.labels[i].to_string(),
            ]
        })
        .collect();
    Ok(PcaOutput {
        rows,
        explained_variance: p.explained_variance,
        total_variance,
    })
}

// ── noise robustness ───────────────────────────────────────────────────

pub struct NoisePoint {
    pub kind: NoiseKind,
    pub sn_ratio: f64,
    pub mean_error: f64,
    pub std_error: f64,
}

/// Forward pass of a (single-stage) chaos model with noise injected at the
/// configured point; returns accuracy on the given set.
fn noisy_accuracy(
    model: &ChaosModel,
    data: &Dataset,
    kind: NoiseKind,
    sn_ratio: f64,
    seed: u64,
    a_obs: f64,
    a_dyn: f64,
) -> Result<f64> {
    let chunk = 256;
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let raw = data.inputs.select_rows(&idx);
        // Read-in (+ observational noise before normalization).
        let mut x = raw;
        if let Some(conv) = &model.frontend {
            let z = chaosdnn_core::autodiff::conv_forward(&x, &conv.kernel, &conv.bias, conv.shape);
            let a = chaosdnn_core::autodiff::tanh_forward(&z);
            x = chaosdnn_core::autodiff::avgpool_forward(&a, conv.shape);
        }
        let mut z = affine_forward(&x, &model.read_in.w, model.read_in.b.as_ref());
        if kind == NoiseKind::Observational {
            for i in 0..z.rows() {
                let spec = NoiseSpec {
                    kind,
                    sn_ratio,
                    seed: seed ^ ((start + i) as u64).wrapping_mul(0x9E37_79B9),
                };
                let noisy = inject_noise(z.row(i), &spec, a_obs)?;
                z.row_mut(i).copy_from_slice(&noisy);
            }
        }
        if model.input_norm {
            z = norm_triplets_forward(&z)?;
        }
        for stage in &model.stages {
            z = match stage {
                Backbone::Discrete { system, steps } => {
                    let mut s = z;
                    for _ in 0..*steps {
                        s = system.step_batch(&s);
                    }
                    s
                }
                stage => {
                    let (field, horizon, dt) = stage.as_field().expect("continuous");
                    BatchTrajectory::integrate(field, &z, horizon, dt)?
                        .final_states()
                        .clone()
                }
            };
        }
        if kind == NoiseKind::Dynamical {
            for i in 0..z.rows() {
                let spec = NoiseSpec {
                    kind,
                    sn_ratio,
                    seed: seed ^ ((start + i) as u64).wrapping_mul(0x9E37_79B9),
                };
                let noisy = inject_noise(z.row(i), &spec, a_dyn)?;
                z.row_mut(i).copy_from_slice(&noisy);
            }
        }
        let logits = affine_forward(&z, &model.read_out.w, model.read_out.b.as_ref());
        for (i, &label) in data.labels[start..end].iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best as u8 == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Error (1 - accuracy) versus SN-ratio for both noise kinds, with the
/// trial spread. State variances are measured on the clean test set at
/// each injection point.
pub fn noise_study(
    model: &Model,
    data: &Dataset,
    sn_ratios: &[f64],
    kinds: &[NoiseKind],
    trials: usize,
    seed: u64,
) -> Result<Vec<NoisePoint>> {
    let chaos = match model {
        Model::Chaos(c) => c,
        _ => return Err(CliError::Config("noise study requires a chaos model".into())),
    };
    // Clean-state variances at the injection points.
    let n_var = data.len().min(1000);
    let idx: Vec<usize> = (0..n_var).collect();
    let sub = data.inputs.select_rows(&idx);
    let mut x = sub.clone();
    if let Some(conv) = &chaos.frontend {
        let z = chaosdnn_core::autodiff::conv_forward(&x, &conv.kernel, &conv.bias, conv.shape);
        let a = chaosdnn_core::autodiff::tanh_forward(&z);
        x = chaosdnn_core::autodiff::avgpool_forward(&a, conv.shape);
    }
    let read_in = affine_forward(&x, &chaos.read_in.w, chaos.read_in.b.as_ref());
    let a_obs = state_variance(&read_in);
    let mut final_states = if chaos.input_norm {
        norm_triplets_forward(&read_in)?
    } else {
        read_in.clone()
    };
    for stage in &chaos.stages {
        final_states = match stage {
            Backbone::Discrete { system, steps } => {
                let mut s = final_states;
                for _ in 0..*steps {
                    s = system.step_batch(&s);
                }
                s
            }
            stage => {
                let (field, horizon, dt) = stage.as_field().expect("continuous");
                BatchTrajectory::integrate(field, &final_states, horizon, dt)?
                    .final_states()
                    .clone()
            }
        };
    }
    let a_dyn = state_variance(&final_states);

    let mut out = Vec::new();
    for &kind in kinds {
        for &ratio in sn_ratios {
            let mut errors = Vec::with_capacity(trials);
            for t in 0..trials {
                let acc = noisy_accuracy(
                    chaos,
                    data,
                    kind,
                    ratio,
                    seed ^ (t as u64).wrapping_mul(0x5851_F42D_4C95_7F2D),
                    a_obs,
                    a_dyn,
                )?;
                errors.push(1.0 - acc);
            }
            let mean = errors.iter().sum::<f64>() / trials as f64;
            let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / trials as f64;
            out.push(NoisePoint {
                kind,
                sn_ratio: ratio,
                mean_error: mean,
                std_error: var.sqrt(),
            });
        }
    }
    Ok(out)
}

/// Clean (noise-free) test error of a model; baseline for the noise study.
pub fn clean_error(model: &Model, data: &Dataset) -> Result<f64> {
    Ok(1.0 - accuracy(model, &data.inputs, &data.labels, 512)?)
}
