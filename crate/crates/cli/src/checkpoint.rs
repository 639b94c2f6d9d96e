//! Model checkpoints: a JSON manifest plus one little-endian `f64` blob
//! per parameter.
//!
//! Backbone blocks are serialized alongside the trainable parameters.
//! Loading rebuilds the model from the archived `(architecture, seed)`
//! pair — which regenerates the backbone deterministically — then verifies
//! the stored backbone blobs bit-for-bit before restoring the trainable
//! parameters, so a corrupted or mismatched checkpoint cannot load
//! silently.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use chaosdnn_core::models::{Backbone, Model};
use chaosdnn_core::{Matrix, RngStream};

use crate::config::ModelConfig;
use crate::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: ModelConfig,
    pub input_dim: usize,
    /// Stream the model was built from; backbone weights regenerate from
    /// it bit-exactly.
    pub seed: u64,
    pub stream: u64,
    /// Parameter name -> [rows, cols], in optimizer order.
    pub params: Vec<(String, [usize; 2])>,
    /// Fixed backbone blocks, also stored as blobs.
    pub backbone: Vec<(String, [usize; 2])>,
    #[serde(default)]
    pub dataset_hash: Option<u64>,
    #[serde(default)]
    pub best_acc: Option<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

fn write_blob(path: &Path, m: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.data().len() * 8);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    if bytes.len() != rows * cols * 8 {
        return Err(CliError::Data(format!(
            "blob {} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            rows * cols * 8
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

/// Backbone blocks of a model as `(name, matrix)` pairs.
fn backbone_blocks(model: &Model) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    if let Model::Chaos(c) = model {
        for (k, stage) in c.stages.iter().enumerate() {
            match stage {
                Backbone::Discrete { system, .. } => {
                    out.push((format!("backbone{k}.w"), system.weight().clone()));
                }
                Backbone::Sto { system, .. } => {
                    out.push((format!("backbone{k}.w_cp"), system.coupling_weights().clone()));
                }
                Backbone::LinearOde { system, .. } => {
                    out.push((format!("backbone{k}.a"), system.a.clone()));
                }
                Backbone::Lorenz { .. } => {}
            }
        }
    }
    out
}

/// Writes a checkpoint directory: `manifest.json` + `params/*.f64le`.
pub fn save_model(
    dir: &Path,
    architecture: &ModelConfig,
    input_dim: usize,
    seed: u64,
    stream: u64,
    model: &Model,
    dataset_hash: Option<u64>,
    best_acc: Option<f64>,
) -> Result<()> {
    fs::create_dir_all(dir.join("params"))?;
    let names = model.param_names();
    let params = model.params();
    let mut param_meta = Vec::with_capacity(names.len());
    for (name, p) in names.iter().zip(&params) {
        param_meta.push((name.clone(), [p.rows(), p.cols()]));
        write_blob(&dir.join("params").join(format!("{name}.f64le")), p)?;
    }
    let mut backbone_meta = Vec::new();
    for (name, m) in backbone_blocks(model) {
        backbone_meta.push((name.clone(), [m.rows(), m.cols()]));
        write_blob(&dir.join("params").join(format!("{name}.f64le")), &m)?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        architecture: architecture.clone(),
        input_dim,
        seed,
        stream,
        params: param_meta,
        backbone: backbone_meta,
        dataset_hash,
        best_acc,
        extra: BTreeMap::new(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Loads a checkpoint: rebuilds from `(architecture, seed, stream)`,
/// verifies the stored backbone blocks bitwise, restores the trainable
/// parameters.
pub fn load_model(dir: &Path) -> Result<(Model, Manifest)> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::Data(format!(
            "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let rng = RngStream::new(manifest.seed, manifest.stream);
    let mut model = manifest.architecture.build(manifest.input_dim, &rng)?;
    // Backbone integrity: regenerated blocks must equal the stored blobs.
    for (name, shape) in &manifest.backbone {
        let stored = read_blob(
            &dir.join("params").join(format!("{name}.f64le")),
            shape[0],
            shape[1],
        )?;
        let regenerated = backbone_blocks(&model)
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| {
                CliError::Data(format!("checkpoint names unknown backbone block {name}"))
            })?;
        if stored != regenerated {
            return Err(CliError::Core(chaosdnn_core::Error::Internal(format!(
                "backbone block {name} does not match its seed regeneration"
            ))));
        }
    }
    // Restore trainable parameters.
    let names = model.param_names();
    if names.len() != manifest.params.len() {
        return Err(CliError::Data(
            "checkpoint parameter list does not match architecture".into(),
        ));
    }
    let mut restored = Vec::with_capacity(names.len());
    for (name, shape) in &manifest.params {
        restored.push(read_blob(
            &dir.join("params").join(format!("{name}.f64le")),
            shape[0],
            shape[1],
        )?);
    }
    for ((p, name), new) in model.params_mut().into_iter().zip(&names).zip(restored) {
        if p.rows() != new.rows() || p.cols() != new.cols() {
            return Err(CliError::Data(format!("blob {name} has the wrong shape")));
        }
        *p = new;
    }
    Ok((model, manifest))
}
