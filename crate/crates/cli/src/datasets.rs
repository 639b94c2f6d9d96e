//! Dataset location, verification, download, and loading.
//!
//! The data directory resolves as: explicit `--data-dir` flag, then the
//! `CHAOSDNN_DATA_DIR` environment variable, then `./data`. IDX files may
//! be present raw or gzipped; `fetch-data` downloads the gzip archives
//! from a mirror list (or copies local paths), verifies SHA-256 checksums,
//! and decompresses.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

use chaosdnn_core::data::{load_idx, synth_2d, synth_2d_samples, Dataset, SynthKind};

use crate::{CliError, Result};

pub const DATA_DIR_ENV: &str = "CHAOSDNN_DATA_DIR";

pub struct DatasetFile {
    pub name: &'static str,
    pub gz_sha256: &'static str,
}

pub struct KnownDataset {
    pub dir: &'static str,
    pub mirrors: &'static [&'static str],
    pub files: [DatasetFile; 4],
}

pub const MNIST: KnownDataset = KnownDataset {
    dir: "mnist",
    mirrors: &[
        "https://storage.googleapis.com/cvdf-datasets/mnist/",
        "https://ossci-datasets.s3.amazonaws.com/mnist/",
    ],
    files: [
        DatasetFile {
            name: "train-images-idx3-ubyte",
            gz_sha256: "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
        },
        DatasetFile {
            name: "train-labels-idx1-ubyte",
            gz_sha256: "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
        },
        DatasetFile {
            name: "t10k-images-idx3-ubyte",
            gz_sha256: "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
        },
        DatasetFile {
            name: "t10k-labels-idx1-ubyte",
            gz_sha256: "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
        },
    ],
};

pub const FASHION_MNIST: KnownDataset = KnownDataset {
    dir: "fashion-mnist",
    mirrors: &["https://github.com/zalandoresearch/fashion-mnist/raw/master/data/fashion/"],
    files: [
        DatasetFile {
            name: "train-images-idx3-ubyte",
            gz_sha256: "3aede38d61863908ad78613f6a32ed271626dd12800ba2636569512369268a84",
        },
        DatasetFile {
            name: "train-labels-idx1-ubyte",
            gz_sha256: "a04f17134ac03560a47e3764e11b92fc97de4d1bfaf8ba1a3aa29af54cc90845",
        },
        DatasetFile {
            name: "t10k-images-idx3-ubyte",
            gz_sha256: "346e55b948d973a97e58d2351dde16a484bd415d4595297633bb08f03db6a073",
        },
        DatasetFile {
            name: "t10k-labels-idx1-ubyte",
            gz_sha256: "67da17c76eaffca5446c3361aaab5c3cd6d1c2608764d35dfb1850b086bf8dd5",
        },
    ],
};

pub fn known_dataset(name: &str) -> Result<&'static KnownDataset> {
    match name {
        "mnist" => Ok(&MNIST),
        "fashion-mnist" => Ok(&FASHION_MNIST),
        other => Err(CliError::Config(format!("unknown dataset '{other}'"))),
    }
}

/// Resolves the data directory from the override, the environment, or the
/// default `./data`.
pub fn data_dir(override_dir: Option<&Path>) -> PathBuf {
    if let Some(d) = override_dir {
        return d.to_path_buf();
    }
    if let Ok(d) = std::env::var(DATA_DIR_ENV) {
        if !d.is_empty() {
            return PathBuf::from(d);
        }
    }
    PathBuf::from("data")
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| CliError::Data(format!("gzip decode failed: {e}")))?;
    Ok(out)
}

/// Reads an IDX file that may be stored raw or gzipped.
fn read_idx_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let raw = dir.join(name);
    if raw.exists() {
        return Ok(fs::read(&raw)?);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return gunzip(&fs::read(&gz)?);
    }
    Err(CliError::Data(format!(
        "missing {name}[.gz] under {}; run `chaosdnn fetch-data` first",
        dir.display()
    )))
}

/// Loads the train/test splits of a known IDX dataset.
pub fn load_idx_dataset(root: &Path, name: &str) -> Result<(Dataset, Dataset)> {
    let spec = known_dataset(name)?;
    let dir = root.join(spec.dir);
    let train = load_idx(
        &read_idx_file(&dir, "train-images-idx3-ubyte")?,
        &read_idx_file(&dir, "train-labels-idx1-ubyte")?,
        &format!("{name}-train"),
    )?;
    let test = load_idx(
        &read_idx_file(&dir, "t10k-images-idx3-ubyte")?,
        &read_idx_file(&dir, "t10k-labels-idx1-ubyte")?,
        &format!("{name}-test"),
    )?;
    Ok((train, test))
}

/// Loads any dataset config: IDX sets by name, or the synthetic 2-D
/// generators as `synth-<kind>` (train and a fresh labelled holdout; the
/// FTMLE map grid comes from [`synth_grid`]).
pub fn load_dataset(
    root: &Path,
    name: &str,
    train_subset: Option<usize>,
    test_subset: Option<usize>,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let (train, test) = if let Some(kind) = name.strip_prefix("synth-") {
        let kind = SynthKind::parse(kind)?;
        let n_train = train_subset.unwrap_or(2000);
        let n_test = test_subset.unwrap_or(500);
        let train = synth_2d_samples(kind, n_train, seed)?;
        let test = synth_2d_samples(kind, n_test, seed ^ 0x7E57_DA7A)?;
        (train, test)
    } else {
        let (mut train, mut test) = load_idx_dataset(root, name)?;
        if let Some(n) = train_subset {
            train = train.take(n)?;
        }
        if let Some(n) = test_subset {
            test = test.take(n)?;
        }
        (train, test)
    };
    Ok((train, test))
}

/// Uniform FTMLE-map grid matching the training draw of a synthetic
/// dataset (same seed, same bounding square).
pub fn synth_grid(name: &str, n_train: usize, n_grid: usize, seed: u64) -> Result<Dataset> {
    let kind = SynthKind::parse(
        name.strip_prefix("synth-")
            .ok_or_else(|| CliError::Config(format!("'{name}' is not a synthetic dataset")))?,
    )?;
    let (_train, grid) = synth_2d(kind, n_train, n_grid, seed)?;
    Ok(grid)
}

fn fetch_one(url_or_path: &str) -> Result<Vec<u8>> {
    if url_or_path.starts_with("http://") || url_or_path.starts_with("https://") {
        let resp = ureq::get(url_or_path)
            .timeout(std::time::Duration::from_secs(300))
            .call()
            .map_err(|e| CliError::Data(format!("download failed: {e}")))?;
        let mut bytes = Vec::new();
        resp.into_reader()
            .read_to_end(&mut bytes)
            .map_err(|e| CliError::Data(format!("download read failed: {e}")))?;
        Ok(bytes)
    } else {
        Ok(fs::read(url_or_path)?)
    }
}

/// Downloads (or copies), verifies, and unpacks one dataset into
/// `root/<dataset dir>`. Extra mirrors are tried before the built-in
/// list; local directory paths are accepted as mirrors.
pub fn fetch_dataset(
    root: &Path,
    name: &str,
    extra_mirrors: &[String],
    quiet: bool,
) -> Result<()> {
    let spec = known_dataset(name)?;
    let dir = root.join(spec.dir);
    fs::create_dir_all(&dir)?;
    for file in &spec.files {
        let raw_path = dir.join(file.name);
        let gz_path = dir.join(format!("{}.gz", file.name));
        if raw_path.exists() {
            if !quiet {
                println!("{} already present", raw_path.display());
            }
            continue;
        }
        // A verified local .gz only needs decompressing.
        if gz_path.exists() {
            let bytes = fs::read(&gz_path)?;
            if sha256_hex(&bytes) == file.gz_sha256 {
                fs::write(&raw_path, gunzip(&bytes)?)?;
                if !quiet {
                    println!("unpacked {}", raw_path.display());
                }
                continue;
            }
        }
        let gz_name = format!("{}.gz", file.name);
        let mut sources: Vec<String> = extra_mirrors
            .iter()
            .map(|m| {
                if m.ends_with('/') {
                    format!("{m}{gz_name}")
                } else {
                    format!("{m}/{gz_name}")
                }
            })
            .collect();
        sources.extend(spec.mirrors.iter().map(|m| format!("{m}{gz_name}")));
        let mut fetched = None;
        let mut last_err = String::new();
        for src in &sources {
            match fetch_one(src) {
                Ok(bytes) => {
                    let digest = sha256_hex(&bytes);
                    if digest == file.gz_sha256 {
                        fetched = Some(bytes);
                        break;
                    }
                    last_err = format!("{src}: checksum mismatch ({digest})");
                }
                Err(e) => last_err = format!("{src}: {e}"),
            }
        }
        let bytes = fetched.ok_or_else(|| {
            CliError::Data(format!("could not fetch {gz_name}; last error: {last_err}"))
        })?;
        fs::write(&gz_path, &bytes)?;
        fs::write(&raw_path, gunzip(&bytes)?)?;
        if !quiet {
            println!("fetched {}", raw_path.display());
        }
    }
    Ok(())
}
