//! The 2-D experiment lattice: one trained model per (cell, trial), with
//! accuracy metrics and the mean backbone FTMLE per cell.
//!
//! Cells execute concurrently on a bounded worker pool; each cell owns a
//! private deterministic substream and writes its result to a private
//! JSON file (write-to-temp, then rename). Interrupted sweeps resume by
//! skipping cells whose files already parse, and the aggregation is a
//! deterministic merge by cell index — a resumed sweep equals an
//! uninterrupted one bitwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use chaosdnn_core::data::Dataset;
use chaosdnn_core::lyapunov::lyapunov_time;
use chaosdnn_core::training::metric_suite;
use chaosdnn_core::{Error as CoreError, RngStream};

use crate::config::{ExperimentConfig, ModelConfig};
use crate::csvio::write_csv;
use crate::experiments::{backbone_mean_ftmle, ffesn_mle, mle_point, ScanFamily, ScanSettings};
use crate::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    /// Substream identifiers recorded for reproducibility.
    pub seed: u64,
    pub stream: u64,
    pub status: String,
    pub best_acc: f64,
    pub epsilon: f64,
    pub log_label: f64,
    pub convergence_epoch: usize,
    pub mean_ftmle: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellResult {
    pub index: usize,
    pub axis1: f64,
    pub axis2: f64,
    /// `ok` if at least one trial completed, else `diverged`.
    pub status: String,
    pub trials: Vec<TrialResult>,
    pub best_acc: f64,
    pub mean_acc: f64,
    pub epsilon: f64,
    pub log_label: f64,
    pub mean_convergence_epoch: f64,
    pub mean_ftmle: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub axis1_name: String,
    pub axis1_values: Vec<f64>,
    pub axis2_name: String,
    pub axis2_values: Vec<f64>,
    /// Row-major over (axis2, axis1): `cells[j * axis1 + i]`.
    pub cells: Vec<CellResult>,
    /// Per-axis1 asymptotic exponent and predictability time of the
    /// autonomous backbone.
    pub lyapunov: Vec<(f64, f64, f64)>,
}

impl SweepGrid {
    pub fn cell(&self, i1: usize, i2: usize) -> &CellResult {
        &self.cells[i2 * self.axis1_values.len() + i1]
    }

    pub fn any_ok(&self) -> bool {
        self.cells.iter().any(|c| c.status == "ok")
    }
}

fn cell_path(out_dir: &Path, index: usize) -> PathBuf {
    out_dir.join("cells").join(format!("cell_{index:04}.json"))
}

fn run_cell(
    config: &ExperimentConfig,
    index: usize,
    axis1_name: &str,
    a1: f64,
    axis2_name: &str,
    a2: f64,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<CellResult> {
    let model_cfg = config
        .model
        .with_axis(axis1_name, a1)?
        .with_axis(axis2_name, a2)?;
    let master = RngStream::new(config.seed, 0).substream(index as u64);
    let mut trials = Vec::with_capacity(config.trials);
    for t in 0..config.trials {
        let stream = master.substream(t as u64);
        let trial = run_trial(config, &model_cfg, t, &stream, train_set, test_set)?;
        trials.push(trial);
    }
    let ok: Vec<&TrialResult> = trials.iter().filter(|t| t.status == "ok").collect();
    let status = if ok.is_empty() { "diverged" } else { "ok" };
    let best_acc = ok.iter().map(|t| t.best_acc).fold(f64::NAN, f64::max);
    let mean_acc = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().map(|t| t.best_acc).sum::<f64>() / ok.len() as f64
    };
    let epsilon = if ok.is_empty() { f64::NAN } else { 1.0 - mean_acc };
    let log_label = if epsilon > 0.0 {
        epsilon.ln().abs()
    } else if ok.is_empty() {
        f64::NAN
    } else {
        (1.0 / (2.0 * test_set.len() as f64)).ln().abs()
    };
    let mean_convergence_epoch = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().map(|t| t.convergence_epoch as f64).sum::<f64>() / ok.len() as f64
    };
    let ftmles: Vec<f64> = ok.iter().filter_map(|t| t.mean_ftmle).collect();
    let mean_ftmle = if ftmles.is_empty() {
        None
    } else {
        Some(ftmles.iter().sum::<f64>() / ftmles.len() as f64)
    };
    Ok(CellResult {
        index,
        axis1: a1,
        axis2: a2,
        status: status.into(),
        trials,
        best_acc,
        mean_acc,
        epsilon,
        log_label,
        mean_convergence_epoch,
        mean_ftmle,
    })
}

fn run_trial(
    config: &ExperimentConfig,
    model_cfg: &ModelConfig,
    trial: usize,
    stream: &RngStream,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrialResult> {
    let mut model = model_cfg.build(train_set.features(), stream)?;
    let mut seed_draw = stream.substream(0xEE);
    let train_seed = seed_draw.next_u64();
    let tc = config.train.to_train_config(train_seed)?;
    let history = match chaosdnn_core::training::train(&mut model, train_set, test_set, &tc) {
        Ok(h) => h,
        Err(CoreError::TrainingDiverged { .. }) | Err(CoreError::Divergence { .. }) => {
            return Ok(TrialResult {
                trial,
                seed: stream.seed(),
                stream: stream.stream(),
                status: "diverged".into(),
                best_acc: f64::NAN,
                epsilon: f64::NAN,
                log_label: f64::NAN,
                convergence_epoch: 0,
                mean_ftmle: None,
            })
        }
        Err(e) => return Err(e.into()),
    };
    let metrics = metric_suite(&history, tc.convergence_tol)?;
    let mean_ftmle = backbone_mean_ftmle(&model, &test_set.inputs, config.ftmle_samples)?;
    Ok(TrialResult {
        trial,
        seed: stream.seed(),
        stream: stream.stream(),
        status: "ok".into(),
        best_acc: metrics.best_acc,
        epsilon: metrics.epsilon,
        log_label: metrics.log_label,
        convergence_epoch: metrics.convergence_epoch,
        mean_ftmle,
    })
}

/// Runs (or resumes) the sweep and writes `grid.json`, `grid.csv`, and the
/// archived config into `out_dir`.
pub fn run_sweep(
    config: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    out_dir: &Path,
    jobs: usize,
    resume: bool,
    quiet: bool,
) -> Result<SweepGrid> {
    let grid_cfg = config
        .grid
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep requires a grid section".into()))?;
    let a1 = &grid_cfg.axis1;
    let a2 = &grid_cfg.axis2;
    if a1.values.is_empty() || a2.values.is_empty() {
        return Err(CliError::Config("sweep axes must be non-empty".into()));
    }
    fs::create_dir_all(out_dir.join("cells"))?;
    fs::write(out_dir.join("config.json"), config.to_json())?;

    let n_cells = a1.values.len() * a2.values.len();
    let cursor = AtomicUsize::new(0);
    let jobs = jobs.max(1);
    let worker = |_worker_id: usize| -> Result<()> {
        loop {
            let index = cursor.fetch_add(1, Ordering::SeqCst);
            if index >= n_cells {
                return Ok(());
            }
            let path = cell_path(out_dir, index);
            if resume && path.exists() {
                if let Ok(text) = fs::read_to_string(&path) {
                    if serde_json::from_str::<CellResult>(&text).is_ok() {
                        continue;
                    }
                }
            }
            let i1 = index % a1.values.len();
            let i2 = index / a1.values.len();
            let cell = run_cell(
                config,
                index,
                &a1.name,
                a1.values[i1],
                &a2.name,
                a2.values[i2],
                train_set,
                test_set,
            )?;
            let tmp = path.with_extension("json.tmp");
            fs::write(&tmp, serde_json::to_string_pretty(&cell)?)?;
            fs::rename(&tmp, &path)?;
            if !quiet {
                println!(
                    "cell {index}/{n_cells}: {}={} {}={} status={} best_acc={:.4}",
                    a1.name, cell.axis1, a2.name, cell.axis2, cell.status, cell.best_acc
                );
            }
        }
    };

    if jobs == 1 {
        worker(0)?;
    } else {
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for w in 0..jobs {
                handles.push(scope.spawn(move || worker(w)));
            }
            for h in handles {
                h.join().map_err(|_| {
                    CliError::Config("sweep worker panicked".into())
                })??;
            }
            Ok(())
        })?;
    }

    // Deterministic merge by cell index.
    let mut cells = Vec::with_capacity(n_cells);
    for index in 0..n_cells {
        let text = fs::read_to_string(cell_path(out_dir, index))?;
        cells.push(serde_json::from_str::<CellResult>(&text)?);
    }

    // Predictability column per axis1 value (autonomous backbone).
    let lyapunov = axis1_lyapunov(config, &a1.name, &a1.values)?;

    let grid = SweepGrid {
        axis1_name: a1.name.clone(),
        axis1_values: a1.values.clone(),
        axis2_name: a2.name.clone(),
        axis2_values: a2.values.clone(),
        cells,
        lyapunov,
    };
    write_grid(out_dir, &grid)?;
    Ok(grid)
}

fn axis1_lyapunov(
    config: &ExperimentConfig,
    axis1_name: &str,
    values: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    let mut out = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let mle = match (&config.model, axis1_name) {
            (ModelConfig::Ffesn { reservoir, density, .. }, "rho") => {
                ffesn_mle(*reservoir, v, *density, config.seed ^ (i as u64), 3000)?
            }
            (ModelConfig::Lorenz { dim, .. }, "F") => {
                let mut s = ScanSettings::defaults(ScanFamily::Lorenz96);
                s.dim = *dim;
                s.seed = config.seed;
                mle_point(ScanFamily::Lorenz96, v, &s)?
            }
            (ModelConfig::Csto { n_osc, dt, .. }, "a_cp") => {
                let mut s = ScanSettings::defaults(ScanFamily::Csto);
                s.dim = *n_osc;
                s.dt = *dt;
                s.mle_time = 20e-9;
                s.seed = config.seed;
                mle_point(ScanFamily::Csto, v, &s)?
            }
            _ => f64::NAN,
        };
        out.push((v, mle, lyapunov_time(mle)));
    }
    Ok(out)
}

pub fn write_grid(out_dir: &Path, grid: &SweepGrid) -> Result<()> {
    fs::write(out_dir.join("grid.json"), serde_json::to_string_pretty(grid)?)?;
    let mut rows = Vec::with_capacity(grid.cells.len());
    for c in &grid.cells {
        let seeds = c
            .trials
            .iter()
            .map(|t| t.stream.to_string())
            .collect::<Vec<_>>()
            .join(";");
        rows.push(vec![
            format!("{}", c.axis1),
            format!("{}", c.axis2),
            c.status.clone(),
            format!("{}", c.best_acc),
            format!("{}", c.mean_acc),
            format!("{}", c.epsilon),
            format!("{}", c.log_label),
            format!("{}", c.mean_convergence_epoch),
            c.mean_ftmle.map(|v| format!("{v}")).unwrap_or_default(),
            seeds,
        ]);
    }
    write_csv(
        &out_dir.join("grid.csv"),
        &[
            &grid.axis1_name,
            &grid.axis2_name,
            "status",
            "best_acc",
            "mean_acc",
            "epsilon",
            "log_label",
            "convergence_epoch",
            "mean_ftmle",
            "seeds",
        ],
        &rows,
    )?;
    let mle_rows: Vec<Vec<String>> = grid
        .lyapunov
        .iter()
        .map(|(v, mle, lt)| vec![format!("{v}"), format!("{mle}"), format!("{lt}")])
        .collect();
    write_csv(
        &out_dir.join("lyapunov.csv"),
        &[&grid.axis1_name, "mle", "lyapunov_time"],
        &mle_rows,
    )?;
    Ok(())
}
