//! `chaosdnn` — train and analyze classifiers whose hidden layer is a
//! fixed chaotic dynamical system.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chaosdnn::checkpoint::{load_model, save_model};
use chaosdnn::config::{ffesn_sweep_preset, ExperimentConfig, Profile};
use chaosdnn::csvio::write_csv;
use chaosdnn::datasets::{data_dir, fetch_dataset, load_dataset};
use chaosdnn::experiments::{
    bifurcation_scan, clean_error, ftmle_report, mle_point, noise_study, pca_states, train_once,
    write_history, write_scan, ScanFamily, ScanSettings,
};
use chaosdnn::figures::render_plot;
use chaosdnn::sweep::run_sweep;
use chaosdnn::{exit_codes, CliError, Result};
use chaosdnn_core::data::NoiseKind;
use chaosdnn_core::lyapunov::lyapunov_time;

#[derive(Parser)]
#[command(
    name = "chaosdnn",
    about = "Chaotic dynamical systems as fixed deep-network backbones",
    version
)]
struct Cli {
    /// Data directory (falls back to $CHAOSDNN_DATA_DIR, then ./data).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Base seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 2)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and verify a dataset (mnist, fashion-mnist).
    FetchData {
        #[arg(long, default_value = "mnist")]
        dataset: String,
        /// Extra mirror URLs or local directories, tried first.
        #[arg(long)]
        mirror: Vec<String>,
    },
    /// Train one model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out/train")]
        out: PathBuf,
    },
    /// Run a 2-D parameter sweep (config file or built-in preset).
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in preset: currently `ffesn`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long, default_value = "out/sweep")]
        out: PathBuf,
        /// Skip cells whose result files already exist.
        #[arg(long)]
        resume: bool,
    },
    /// Bifurcation scatter + MLE curve over a parameter range.
    Bifurcation {
        /// lorenz96, csto, or relax.
        #[arg(long)]
        system: String,
        #[arg(long)]
        param_min: f64,
        #[arg(long)]
        param_max: f64,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, default_value = "out/bifurcation")]
        out: PathBuf,
    },
    /// Per-sample FTMLE distributions of a trained checkpoint.
    Ftmle {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value = "out/ftmle")]
        out: PathBuf,
    },
    /// Benettin maximum Lyapunov exponent of one system.
    Mle {
        #[arg(long)]
        system: String,
        #[arg(long)]
        param: f64,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// PCA of backbone states (initial or final) of a checkpoint.
    Pca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "mnist")]
        dataset: String,
        /// `initial` or `final`.
        #[arg(long, default_value = "final")]
        stage: String,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value = "out/pca")]
        out: PathBuf,
    },
    /// Error vs signal-to-noise ratio for a trained checkpoint.
    Noise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "mnist")]
        dataset: String,
        /// Comma-separated: observational,dynamical.
        #[arg(long, default_value = "observational,dynamical")]
        kinds: String,
        /// Comma-separated SN ratios.
        #[arg(long, default_value = "1,10,100,1e4,1e6,1e12")]
        sn_ratios: String,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value = "out/noise")]
        out: PathBuf,
    },
    /// Integrate one system and export the trajectory as CSV
    /// (t, x1..xN).
    Trajectory {
        /// lorenz96, csto, or relax.
        #[arg(long)]
        system: String,
        #[arg(long)]
        param: f64,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value = "out/trajectory.csv")]
        out: PathBuf,
    },
    /// Generate a synthetic 2-D dataset and export it as CSV.
    Synth {
        /// clusters, rings, or moons.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 9000)]
        n_grid: usize,
        #[arg(long, default_value = "out/synth")]
        out: PathBuf,
    },
    /// Render a CSV artifact as an SVG figure.
    Plot {
        #[arg(long)]
        input: PathBuf,
        /// heatmap, scatter, line, or ridgeline.
        #[arg(long, default_value = "heatmap")]
        kind: String,
        /// Column to color heat-map cells by.
        #[arg(long, default_value = "log_label")]
        metric: String,
        /// Draw the predictability-time curve from lyapunov.csv next to
        /// the input grid.
        #[arg(long)]
        overlay_lyapunov: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit_codes::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &PathBuf, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let root = data_dir(cli.data_dir.as_deref());
    match cli.command {
        Command::FetchData { dataset, mirror } => {
            fetch_dataset(&root, &dataset, &mirror, false)?;
            println!("{dataset} ready under {}", root.display());
            Ok(())
        }
        Command::Train { config, out } => {
            let config = load_config(&config, cli.seed)?;
            let (train_set, test_set) = load_dataset(
                &root,
                &config.dataset.name,
                config.dataset.train_subset,
                config.dataset.test_subset,
                config.seed,
            )?;
            let outcome = train_once(&config, &train_set, &test_set, 0)?;
            fs::create_dir_all(&out)?;
            write_history(&out, &outcome.history)?;
            let summary = serde_json::json!({
                "best_acc": outcome.metrics.best_acc,
                "epsilon": outcome.metrics.epsilon,
                "log_label": outcome.metrics.log_label,
                "convergence_epoch": outcome.metrics.convergence_epoch,
                "wall_seconds": outcome.history.wall_seconds,
                "dataset_hash": train_set.hash,
                "n_train": train_set.len(),
                "n_test": test_set.len(),
            });
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            save_model(
                &out.join("checkpoint"),
                &config.model,
                train_set.features(),
                config.seed,
                0,
                &outcome.model,
                Some(train_set.hash),
                Some(outcome.metrics.best_acc),
            )?;
            println!(
                "best_acc={:.4} epsilon={:.4} convergence_epoch={}",
                outcome.metrics.best_acc, outcome.metrics.epsilon, outcome.metrics.convergence_epoch
            );
            Ok(())
        }
        Command::Sweep {
            config,
            preset,
            profile,
            out,
            resume,
        } => {
            let profile = Profile::parse(&profile)?;
            let config = match (config, preset) {
                (Some(path), _) => load_config(&path, cli.seed)?,
                (None, Some(name)) if name == "ffesn" => {
                    ffesn_sweep_preset(profile, cli.seed.unwrap_or(1))
                }
                (None, Some(other)) => {
                    return Err(CliError::Config(format!("unknown preset '{other}'")))
                }
                (None, None) => {
                    return Err(CliError::Config(
                        "sweep needs --config FILE or --preset ffesn".into(),
                    ))
                }
            };
            let (train_set, test_set) = load_dataset(
                &root,
                &config.dataset.name,
                config.dataset.train_subset,
                config.dataset.test_subset,
                config.seed,
            )?;
            fs::create_dir_all(&out)?;
            let grid = run_sweep(&config, &train_set, &test_set, &out, cli.jobs, resume, false)?;
            println!("sweep written to {}", out.display());
            if !grid.any_ok() {
                return Err(CliError::DivergedOnly);
            }
            Ok(())
        }
        Command::Bifurcation {
            system,
            param_min,
            param_max,
            points,
            dim,
            horizon,
            out,
        } => {
            let family = ScanFamily::parse(&system)?;
            let mut settings = ScanSettings::defaults(family);
            if let Some(d) = dim {
                settings.dim = d;
            }
            if let Some(h) = horizon {
                settings.horizon = h;
            }
            if let Some(seed) = cli.seed {
                settings.seed = seed;
            }
            if points < 2 {
                return Err(CliError::Config("need at least 2 scan points".into()));
            }
            let params: Vec<f64> = (0..points)
                .map(|i| param_min + (param_max - param_min) * i as f64 / (points - 1) as f64)
                .collect();
            let scan = bifurcation_scan(family, &params, &settings)?;
            fs::create_dir_all(&out)?;
            write_scan(&out, &scan)?;
            println!("bifurcation scan written to {}", out.display());
            Ok(())
        }
        Command::Ftmle {
            checkpoint,
            dataset,
            samples,
            out,
        } => {
            let (model, manifest) = load_model(&checkpoint)?;
            let (_, test_set) = load_dataset(&root, &dataset, None, None, manifest.seed)?;
            // 2-D models also render the (x, y, lambda) map over the
            // generator's uniform grid.
            let grid = if dataset.starts_with("synth-") && manifest.input_dim == 2 {
                Some(chaosdnn::datasets::synth_grid(&dataset, 2000, 9000, manifest.seed)?)
            } else {
                None
            };
            let report = ftmle_report(
                &model,
                &test_set.inputs,
                samples,
                grid.as_ref().map(|g| &g.inputs),
            )?;
            fs::create_dir_all(&out)?;
            write_csv(
                &out.join("ftmle.csv"),
                &["sample_id", "layer", "lambda"],
                &report.rows,
            )?;
            if !report.map_rows.is_empty() {
                write_csv(&out.join("map.csv"), &["x", "y", "lambda"], &report.map_rows)?;
            }
            println!("ftmle report written to {}", out.display());
            Ok(())
        }
        Command::Mle {
            system,
            param,
            dim,
            horizon,
        } => {
            let family = ScanFamily::parse(&system)?;
            let mut settings = ScanSettings::defaults(family);
            if let Some(d) = dim {
                settings.dim = d;
            }
            if let Some(h) = horizon {
                settings.mle_time = h;
            }
            if let Some(seed) = cli.seed {
                settings.seed = seed;
            }
            let mle = mle_point(family, param, &settings)?;
            println!("mle={mle} lyapunov_time={}", lyapunov_time(mle));
            Ok(())
        }
        Command::Pca {
            checkpoint,
            dataset,
            stage,
            samples,
            out,
        } => {
            let final_stage = match stage.as_str() {
                "final" => true,
                "initial" => false,
                other => {
                    return Err(CliError::Config(format!(
                        "stage must be initial or final, got '{other}'"
                    )))
                }
            };
            let (model, manifest) = load_model(&checkpoint)?;
            let (_, test_set) = load_dataset(&root, &dataset, None, None, manifest.seed)?;
            let pca_out = pca_states(&model, &test_set, final_stage, samples)?;
            fs::create_dir_all(&out)?;
            write_csv(
                &out.join("pca.csv"),
                &["sample_id", "pc1", "pc2", "label"],
                &pca_out.rows,
            )?;
            let summary = serde_json::json!({
                "stage": stage,
                "explained_variance": pca_out.explained_variance,
                "total_variance": pca_out.total_variance,
            });
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("pca written to {}", out.display());
            Ok(())
        }
        Command::Noise {
            checkpoint,
            dataset,
            kinds,
            sn_ratios,
            trials,
            out,
        } => {
            let (model, manifest) = load_model(&checkpoint)?;
            let (_, test_set) = load_dataset(&root, &dataset, None, Some(2000), manifest.seed)?;
            let kinds: Vec<NoiseKind> = kinds
                .split(',')
                .map(|k| match k.trim() {
                    "observational" | "obs" => Ok(NoiseKind::Observational),
                    "dynamical" | "dyn" => Ok(NoiseKind::Dynamical),
                    other => Err(CliError::Config(format!("unknown noise kind '{other}'"))),
                })
                .collect::<Result<_>>()?;
            let ratios: Vec<f64> = sn_ratios
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CliError::Config(format!("bad SN ratio '{s}'")))
                })
                .collect::<Result<_>>()?;
            let points = noise_study(
                &model,
                &test_set,
                &ratios,
                &kinds,
                trials,
                cli.seed.unwrap_or(manifest.seed),
            )?;
            let clean = clean_error(&model, &test_set)?;
            fs::create_dir_all(&out)?;
            let rows: Vec<Vec<String>> = points
                .iter()
                .map(|p| {
                    vec![
                        match p.kind {
                            NoiseKind::Observational => "observational".into(),
                            NoiseKind::Dynamical => "dynamical".into(),
                        },
                        format!("{}", p.sn_ratio),
                        format!("{}", p.mean_error),
                        format!("{}", p.std_error),
                        format!("{clean}"),
                    ]
                })
                .collect();
            write_csv(
                &out.join("noise.csv"),
                &["kind", "sn_ratio", "mean_error", "std_error", "clean_error"],
                &rows,
            )?;
            println!("noise study written to {}", out.display());
            Ok(())
        }
        Command::Trajectory {
            system,
            param,
            dim,
            horizon,
            dt,
            out,
        } => {
            let family = ScanFamily::parse(&system)?;
            let mut settings = ScanSettings::defaults(family);
            if let Some(d) = dim {
                settings.dim = d;
            }
            if let Some(h) = horizon {
                settings.horizon = h;
            }
            if let Some(step) = dt {
                settings.dt = step;
            }
            if let Some(seed) = cli.seed {
                settings.seed = seed;
            }
            let traj = chaosdnn::experiments::sample_trajectory(family, param, &settings)?;
            let n = traj.states[0].len();
            let header: Vec<String> = std::iter::once("t".to_string())
                .chain((1..=n).map(|i| format!("x{i}")))
                .collect();
            let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
            let rows: Vec<Vec<String>> = traj
                .times
                .iter()
                .zip(&traj.states)
                .map(|(t, s)| {
                    std::iter::once(format!("{t}"))
                        .chain(s.iter().map(|v| format!("{v}")))
                        .collect()
                })
                .collect();
            write_csv(&out, &header_refs, &rows)?;
            println!("trajectory written to {}", out.display());
            Ok(())
        }
        Command::Synth {
            kind,
            n_train,
            n_grid,
            out,
        } => {
            let kind = chaosdnn_core::data::SynthKind::parse(&kind)?;
            let seed = cli.seed.unwrap_or(1);
            let (train, grid) = chaosdnn_core::data::synth_2d(kind, n_train, n_grid, seed)?;
            fs::create_dir_all(&out)?;
            let rows: Vec<Vec<String>> = (0..train.len())
                .map(|i| {
                    vec![
                        format!("{}", train.inputs.get(i, 0)),
                        format!("{}", train.inputs.get(i, 1)),
                        train.labels[i].to_string(),
                    ]
                })
                .collect();
            write_csv(&out.join("train.csv"), &["x", "y", "label"], &rows)?;
            let rows: Vec<Vec<String>> = (0..grid.len())
                .map(|i| {
                    vec![
                        format!("{}", grid.inputs.get(i, 0)),
                        format!("{}", grid.inputs.get(i, 1)),
                    ]
                })
                .collect();
            write_csv(&out.join("grid.csv"), &["x", "y"], &rows)?;
            println!("synthetic dataset written to {}", out.display());
            Ok(())
        }
        Command::Plot {
            input,
            kind,
            metric,
            overlay_lyapunov,
            out,
        } => {
            let svg_text = render_plot(&input, &kind, &metric, overlay_lyapunov)?;
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&out, svg_text)?;
            println!("plot written to {}", out.display());
            Ok(())
        }
    }
}
