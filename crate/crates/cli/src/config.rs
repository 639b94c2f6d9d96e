//! Experiment configuration: the JSON schema the CLI consumes and the
//! `desk`/`paper` presets. An archived config plus its seed reproduces the
//! run bitwise.

use serde::{Deserialize, Serialize};

use chaosdnn_core::autodiff::{ConvShape, LossKind};
use chaosdnn_core::dynamics::StoParams;
use chaosdnn_core::models::{ChaosModel, CnnModel, LinearModel, MlpModel, Model};
use chaosdnn_core::training::TrainConfig;
use chaosdnn_core::RngStream;

use crate::{CliError, Result};

pub const MNIST_SIDE: usize = 28;
pub const MNIST_DIM: usize = MNIST_SIDE * MNIST_SIDE;

/// Default convolution stage: 8 channels of 5x5 kernels, tanh, 2x2
/// average pooling.
pub fn default_conv_shape() -> ConvShape {
    ConvShape {
        in_h: MNIST_SIDE,
        in_w: MNIST_SIDE,
        k: 5,
        channels: 8,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Coarse grids on a 10k/2k MNIST subset, 15 epochs.
    Desk,
    /// Full dataset and the published protocol; expensive.
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(CliError::Config(format!("unknown profile '{other}'"))),
        }
    }
}

/// Spin-torque parameters in config form; defaults mirror
/// [`StoParams::default`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StoParamsConfig {
    pub m_s: f64,
    pub h_k: f64,
    pub h_appl: f64,
    pub volume: f64,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub current: f64,
    pub p: [f64; 3],
}

impl Default for StoParamsConfig {
    fn default() -> Self {
        let p = StoParams::default();
        StoParamsConfig {
            m_s: p.m_s,
            h_k: p.h_k,
            h_appl: p.h_appl,
            volume: p.volume,
            eta: p.eta,
            lambda: p.lambda,
            gamma: p.gamma,
            alpha: p.alpha,
            current: p.current,
            p: p.p,
        }
    }
}

impl StoParamsConfig {
    pub fn to_params(&self) -> StoParams {
        StoParams {
            m_s: self.m_s,
            h_k: self.h_k,
            h_appl: self.h_appl,
            volume: self.volume,
            eta: self.eta,
            lambda: self.lambda,
            gamma: self.gamma,
            alpha: self.alpha,
            current: self.current,
            p: self.p,
            ..StoParams::default()
        }
    }
}

fn default_density() -> f64 {
    0.5
}

fn default_dt_lorenz() -> f64 {
    0.01
}

fn default_dt_sto() -> f64 {
    1e-13
}

fn default_classes() -> usize {
    10
}

/// Model architecture; `family` selects the variant.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    Linear {
        #[serde(default = "default_classes")]
        classes: usize,
    },
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_classes")]
        classes: usize,
        /// Rescale square hidden weights to this spectral radius.
        #[serde(default)]
        spectral_radius: Option<f64>,
    },
    Cnn {
        hidden: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    Ffesn {
        reservoir: usize,
        rho: f64,
        #[serde(default = "default_density")]
        density: f64,
        steps: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    Lorenz {
        dim: usize,
        forcing: f64,
        horizon: f64,
        #[serde(default = "default_dt_lorenz")]
        dt: f64,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    Csto {
        n_osc: usize,
        a_cp: f64,
        horizon: f64,
        #[serde(default = "default_dt_sto")]
        dt: f64,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default)]
        params: StoParamsConfig,
        /// Prepend the convolutional frontend.
        #[serde(default)]
        conv_frontend: bool,
    },
    DeepCsto {
        n_osc: usize,
        a_cps: Vec<f64>,
        horizons: Vec<f64>,
        #[serde(default = "default_dt_sto")]
        dt: f64,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default)]
        params: StoParamsConfig,
    },
}

impl ModelConfig {
    pub fn family_name(&self) -> &'static str {
        match self {
            ModelConfig::Linear { .. } => "linear",
            ModelConfig::Mlp { .. } => "mlp",
            ModelConfig::Cnn { .. } => "cnn",
            ModelConfig::Ffesn { .. } => "ffesn",
            ModelConfig::Lorenz { .. } => "lorenz",
            ModelConfig::Csto { .. } => "csto",
            ModelConfig::DeepCsto { .. } => "deep_csto",
        }
    }

    /// Builds the model for `input_dim`-wide inputs from a seed stream.
    pub fn build(&self, input_dim: usize, rng: &RngStream) -> Result<Model> {
        Ok(match self {
            ModelConfig::Linear { classes } => {
                Model::Linear(LinearModel::new(input_dim, *classes, rng))
            }
            ModelConfig::Mlp {
                hidden,
                classes,
                spectral_radius,
            } => {
                let mut dims = vec![input_dim];
                dims.extend_from_slice(hidden);
                dims.push(*classes);
                let mlp = match spectral_radius {
                    Some(rho) => MlpModel::with_spectral_radius(&dims, *rho, rng)?,
                    None => MlpModel::new(&dims, rng)?,
                };
                Model::Mlp(mlp)
            }
            ModelConfig::Cnn { hidden, classes } => {
                if input_dim != MNIST_DIM {
                    return Err(CliError::Config(format!(
                        "cnn expects {MNIST_DIM}-pixel images, dataset has {input_dim}"
                    )));
                }
                Model::Cnn(CnnModel::new(default_conv_shape(), *hidden, *classes, rng))
            }
            ModelConfig::Ffesn {
                reservoir,
                rho,
                density,
                steps,
                classes,
            } => Model::Chaos(ChaosModel::ffesn(
                input_dim, *reservoir, *rho, *density, *steps, *classes, rng,
            )?),
            ModelConfig::Lorenz {
                dim,
                forcing,
                horizon,
                dt,
                classes,
            } => Model::Chaos(ChaosModel::lorenz(
                input_dim, *dim, *forcing, *horizon, *dt, *classes, rng,
            )?),
            ModelConfig::Csto {
                n_osc,
                a_cp,
                horizon,
                dt,
                classes,
                params,
                conv_frontend,
            } => {
                let shape = default_conv_shape();
                let read_in_dim = if *conv_frontend {
                    shape.output_dim()
                } else {
                    input_dim
                };
                let mut model = ChaosModel::csto(
                    read_in_dim,
                    *n_osc,
                    params.to_params(),
                    *a_cp,
                    *horizon,
                    *dt,
                    *classes,
                    rng,
                )?;
                if *conv_frontend {
                    if input_dim != MNIST_DIM {
                        return Err(CliError::Config(format!(
                            "conv frontend expects {MNIST_DIM}-pixel images"
                        )));
                    }
                    model = model.with_conv_frontend(shape, rng);
                }
                Model::Chaos(model)
            }
            ModelConfig::DeepCsto {
                n_osc,
                a_cps,
                horizons,
                dt,
                classes,
                params,
            } => Model::Chaos(ChaosModel::deep_csto(
                input_dim,
                *n_osc,
                params.to_params(),
                a_cps,
                horizons,
                *dt,
                *classes,
                rng,
            )?),
        })
    }

    /// Applies a sweep-axis value to the named architecture knob.
    pub fn with_axis(&self, name: &str, value: f64) -> Result<ModelConfig> {
        let mut c = self.clone();
        match (&mut c, name) {
            (ModelConfig::Ffesn { rho, .. }, "rho") => *rho = value,
            (ModelConfig::Ffesn { steps, .. }, "T") => *steps = value as usize,
            (ModelConfig::Lorenz { forcing, .. }, "F") => *forcing = value,
            (ModelConfig::Lorenz { horizon, .. }, "T") => *horizon = value,
            (ModelConfig::Csto { a_cp, .. }, "a_cp") => *a_cp = value,
            (ModelConfig::Csto { horizon, .. }, "T") => *horizon = value,
            (ModelConfig::Mlp {
                spectral_radius, ..
            }, "rho") => *spectral_radius = Some(value),
            _ => {
                return Err(CliError::Config(format!(
                    "axis '{name}' does not apply to family '{}'",
                    self.family_name()
                )))
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    /// `mnist`, `fashion-mnist`, or `synth-clusters` / `synth-rings` /
    /// `synth-moons`.
    pub name: String,
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub convergence_tol: f64,
    pub loss: String,
    pub patience: Option<usize>,
    pub track_rho: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 5e-3,
            momentum: 0.9,
            batch_size: 64,
            max_epochs: 60,
            eval_every: 1,
            convergence_tol: 5e-4,
            loss: "softmax_ce".into(),
            patience: None,
            track_rho: false,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig> {
        let loss = match self.loss.as_str() {
            "softmax_ce" => LossKind::SoftmaxCrossEntropy,
            "mse" => LossKind::Mse,
            other => return Err(CliError::Config(format!("unknown loss '{other}'"))),
        };
        Ok(TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed,
            eval_every: self.eval_every,
            convergence_tol: self.convergence_tol,
            loss,
            rho_cadence: if self.track_rho { Some(1) } else { None },
            patience: self.patience,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridAxis {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridConfig {
    pub axis1: GridAxis,
    pub axis2: GridAxis,
}

fn default_trials() -> usize {
    1
}

fn default_ftmle_samples() -> usize {
    200
}

/// A complete, archivable experiment description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub seed: u64,
    /// Test samples used for the per-cell mean-FTMLE column.
    #[serde(default = "default_ftmle_samples")]
    pub ftmle_samples: usize,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// The echo-state sweep preset (spectral radius x iteration steps).
pub fn ffesn_sweep_preset(profile: Profile, seed: u64) -> ExperimentConfig {
    let (axis1, axis2, dataset, epochs, trials) = match profile {
        Profile::Desk => (
            vec![0.3, 0.6, 1.0, 1.4, 1.8],
            vec![1.0, 5.0, 10.0, 15.0, 20.0],
            DatasetConfig {
                name: "mnist".into(),
                train_subset: Some(10_000),
                test_subset: Some(2_000),
            },
            15,
            1,
        ),
        Profile::Paper => (
            (1..=20).map(|i| i as f64 * 0.1).collect(),
            (1..=30).map(|i| i as f64).collect(),
            DatasetConfig {
                name: "mnist".into(),
                train_subset: None,
                test_subset: None,
            },
            60,
            5,
        ),
    };
    ExperimentConfig {
        model: ModelConfig::Ffesn {
            reservoir: 500,
            rho: 1.0,
            density: 0.5,
            steps: 1,
            classes: 10,
        },
        dataset,
        train: TrainSettings {
            max_epochs: epochs,
            ..TrainSettings::default()
        },
        grid: Some(GridConfig {
            axis1: GridAxis {
                name: "rho".into(),
                values: axis1,
            },
            axis2: GridAxis {
                name: "T".into(),
                values: axis2,
            },
        }),
        trials,
        seed,
        ftmle_samples: 200,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json() {
        let c = ffesn_sweep_preset(Profile::Desk, 42);
        let json = c.to_json();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn axis_patching() {
        let c = ModelConfig::Ffesn {
            reservoir: 10,
            rho: 1.0,
            density: 0.5,
            steps: 1,
            classes: 10,
        };
        let patched = c.with_axis("rho", 1.8).unwrap().with_axis("T", 5.0).unwrap();
        match patched {
            ModelConfig::Ffesn { rho, steps, .. } => {
                assert_eq!(rho, 1.8);
                assert_eq!(steps, 5);
            }
            _ => unreachable!(),
        }
        assert!(c.with_axis("a_cp", 1.0).is_err());
    }

    #[test]
    fn builds_are_deterministic() {
        let c = ModelConfig::Ffesn {
            reservoir: 20,
            rho: 1.2,
            density: 0.5,
            steps: 2,
            classes: 10,
        };
        let rng = RngStream::new(7, 0);
        let a = c.build(16, &rng).unwrap();
        let b = c.build(16, &rng).unwrap();
        for (x, y) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x.data(), y.data());
        }
    }
}
