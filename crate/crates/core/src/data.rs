//! Datasets: IDX parsing, synthetic 2-D generators, and noise injection.
//!
//! File IO lives in the CLI crate; this module works on byte slices and
//! in-memory matrices only. Dataset hashes are FNV-1a over the decoded
//! float content in little-endian byte order, so they are stable across
//! platforms and loads.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_arg, Error, Result};
use crate::fmath;
use crate::matrix::Matrix;
use crate::rng::RngStream;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

// ── dataset ────────────────────────────────────────────────────────────

/// An in-memory classification dataset; inputs are samples x features in
/// [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<u8>,
    pub classes: usize,
    pub name: String,
    pub hash: u64,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<u8>, classes: usize, name: String) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(invalid_arg("Dataset: sample/label count mismatch"));
        }
        if labels.iter().any(|&l| l as usize >= classes) {
            return Err(invalid_arg("Dataset: label out of range"));
        }
        if !inputs.is_finite() {
            return Err(invalid_arg("Dataset: non-finite input"));
        }
        let hash = dataset_hash(&inputs, &labels, classes);
        Ok(Dataset {
            inputs,
            labels,
            classes,
            name,
            hash,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    /// First `n` samples as a new dataset (deterministic subsetting).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset::new(
            self.inputs.select_rows(&idx),
            self.labels[..n].to_vec(),
            self.classes,
            format!("{}[..{n}]", self.name),
        )
    }
}

/// FNV-1a over the canonical little-endian encoding of the decoded
/// content; platform-independent by construction.
pub fn dataset_hash(inputs: &Matrix, labels: &[u8], classes: usize) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    eat(&(inputs.rows() as u64).to_le_bytes());
    eat(&(inputs.cols() as u64).to_le_bytes());
    eat(&(classes as u64).to_le_bytes());
    for v in inputs.data() {
        eat(&v.to_le_bytes());
    }
    eat(labels);
    h
}

// ── IDX format ─────────────────────────────────────────────────────────

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(Error::Parse {
            offset,
            what: String::from("truncated header"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an IDX image file (magic 0x00000803): returns
/// `(count, rows, cols, pixels)` with pixels scaled to [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            what: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Parse {
            offset: bytes.len(),
            what: format!("truncated image data: got {} bytes, need {expected}", bytes.len()),
        });
    }
    let pixels = bytes[16..expected]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok((count, rows, cols, pixels))
}

/// Parses an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            what: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Parse {
            offset: bytes.len(),
            what: format!("truncated label data: got {} bytes, need {expected}", bytes.len()),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Decodes an image/label IDX pair into a dataset.
pub fn load_idx(image_bytes: &[u8], label_bytes: &[u8], name: &str) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != count {
        return Err(Error::Parse {
            offset: 4,
            what: format!("{count} images but {} labels", labels.len()),
        });
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let inputs = Matrix::from_vec(count, rows * cols, pixels)?;
    Dataset::new(inputs, labels, classes, String::from(name))
}

/// Encodes images (byte pixels) into the IDX format; the inverse of
/// [`parse_idx_images`] up to the [0, 1] scaling.
pub fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        debug_assert_eq!(img.len(), rows * cols);
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

// ── synthetic 2-D generators ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Three well-separated Gaussian clusters (three classes).
    Clusters,
    /// Two concentric rings (two classes).
    Rings,
    /// Two interleaved half-moons (two classes).
    Moons,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clusters" => Ok(SynthKind::Clusters),
            "rings" => Ok(SynthKind::Rings),
            "moons" => Ok(SynthKind::Moons),
            other => Err(invalid_arg(format!("unknown 2-D generator '{other}'"))),
        }
    }

    pub fn classes(self) -> usize {
        match self {
            SynthKind::Clusters => 3,
            SynthKind::Rings | SynthKind::Moons => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Clusters => "clusters",
            SynthKind::Rings => "rings",
            SynthKind::Moons => "moons",
        }
    }
}

fn sample_point(kind: SynthKind, class: usize, rng: &mut RngStream) -> (f64, f64) {
    match kind {
        SynthKind::Clusters => {
            // Cluster centers on a unit circle, sigma = 0.08, so centers
            // are more than 10 sigma apart.
            let angle = 2.0 * fmath::PI * class as f64 / 3.0;
            let (cx, cy) = (fmath::cos(angle), fmath::sin(angle));
            (cx + 0.08 * rng.normal(), cy + 0.08 * rng.normal())
        }
        SynthKind::Rings => {
            let radius = if class == 0 { 0.5 } else { 1.0 };
            let angle = rng.uniform(0.0, 2.0 * fmath::PI);
            let r = radius + 0.05 * rng.normal();
            (r * fmath::cos(angle), r * fmath::sin(angle))
        }
        SynthKind::Moons => {
            let angle = rng.uniform(0.0, fmath::PI);
            let (mut x, mut y) = if class == 0 {
                (fmath::cos(angle), fmath::sin(angle))
            } else {
                (1.0 - fmath::cos(angle), 0.5 - fmath::sin(angle))
            };
            x += 0.08 * rng.normal();
            y += 0.08 * rng.normal();
            (x, y)
        }
    }
}

/// `n` labelled draws from one generator (round-robin classes).
pub fn synth_2d_samples(kind: SynthKind, n: usize, seed: u64) -> Result<Dataset> {
    let classes = kind.classes();
    if n < classes {
        return Err(invalid_arg("synth_2d: need at least one sample per class"));
    }
    let mut rng = RngStream::new(seed, 0);
    let mut inputs = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let (x, y) = sample_point(kind, class, &mut rng);
        inputs.set(i, 0, x);
        inputs.set(i, 1, y);
        labels.push(class as u8);
    }
    Dataset::new(inputs, labels, classes, format!("synth-{}", kind.name()))
}

/// Generates `(train, grid)`: `n_train` labelled samples from the chosen
/// generator plus a uniform test grid over the training data's bounding
/// square for FTMLE map rendering. Grid labels are 0 placeholders.
pub fn synth_2d(
    kind: SynthKind,
    n_train: usize,
    n_test_grid: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let train = synth_2d_samples(kind, n_train, seed)?;
    let inputs = &train.inputs;
    // Bounding square (equal extents on both axes).
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in inputs.data() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let side = fmath::ceil(fmath::sqrt(n_test_grid as f64)) as usize;
    let mut grid = Matrix::zeros(n_test_grid, 2);
    let mut count = 0;
    'outer: for i in 0..side {
        for j in 0..side {
            if count == n_test_grid {
                break 'outer;
            }
            let fx = if side > 1 { j as f64 / (side - 1) as f64 } else { 0.5 };
            let fy = if side > 1 { i as f64 / (side - 1) as f64 } else { 0.5 };
            grid.set(count, 0, lo + fx * (hi - lo));
            grid.set(count, 1, lo + fy * (hi - lo));
            count += 1;
        }
    }
    let test = Dataset::new(
        grid,
        vec![0; n_test_grid],
        train.classes,
        format!("synth-{}-grid", kind.name()),
    )?;
    Ok((train, test))
}

// ── noise injection ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Added to the read-in result before normalization.
    Observational,
    /// Added to the final state before the read-out.
    Dynamical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Signal-to-noise variance ratio `A_s / A_n`.
    pub sn_ratio: f64,
    pub seed: u64,
}

/// Adds zero-mean Gaussian noise with variance `state_variance /
/// sn_ratio` to a fresh copy of `v`. Deterministic in the spec's seed.
pub fn inject_noise(v: &[f64], spec: &NoiseSpec, state_variance: f64) -> Result<Vec<f64>> {
    if !(spec.sn_ratio > 0.0) {
        return Err(invalid_arg("inject_noise: sn_ratio must be positive"));
    }
    if !(state_variance > 0.0) {
        return Err(invalid_arg("inject_noise: state variance must be positive"));
    }
    let sigma = fmath::sqrt(state_variance / spec.sn_ratio);
    let stream = match spec.kind {
        NoiseKind::Observational => 1,
        NoiseKind::Dynamical => 2,
    };
    let mut rng = RngStream::new(spec.seed, stream);
    Ok(v.iter().map(|x| x + sigma * rng.normal()).collect())
}

/// Empirical per-component variance of a batch (rows are samples),
/// pooled over all components; the `A_s` estimate used for noise scaling.
pub fn state_variance(states: &Matrix) -> f64 {
    let n = states.data().len();
    if n == 0 {
        return 0.0;
    }
    let mean: f64 = states.data().iter().sum::<f64>() / n as f64;
    states
        .data()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_images() -> (Vec<Vec<u8>>, Vec<u8>) {
        let images: Vec<Vec<u8>> = (0..4)
            .map(|i| (0..6).map(|p| (i * 40 + p * 7) as u8).collect())
            .collect();
        (images, vec![0, 1, 2, 1])
    }

    #[test]
    fn idx_round_trip_bitwise() {
        let (images, labels) = tiny_images();
        let img_bytes = encode_idx_images(&images, 2, 3);
        let lab_bytes = encode_idx_labels(&labels);
        let ds = load_idx(&img_bytes, &lab_bytes, "tiny").unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.features(), 6);
        assert_eq!(ds.labels, labels);
        for (i, img) in images.iter().enumerate() {
            for (j, &b) in img.iter().enumerate() {
                assert_eq!(ds.inputs.get(i, j), b as f64 / 255.0);
            }
        }
        // Pixel range invariant.
        for v in ds.inputs.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn idx_wrong_magic_is_parse_error_at_zero() {
        let mut bytes = encode_idx_images(&[vec![0u8; 4]], 2, 2);
        bytes[3] = 0x99;
        match parse_idx_images(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_idx_labels(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncation_reports_offset() {
        let (images, _) = tiny_images();
        let img_bytes = encode_idx_images(&images, 2, 3);
        match parse_idx_images(&img_bytes[..20]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch() {
        let (images, _) = tiny_images();
        let img_bytes = encode_idx_images(&images, 2, 3);
        let lab_bytes = encode_idx_labels(&[0, 1]);
        assert!(matches!(
            load_idx(&img_bytes, &lab_bytes, "bad"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn dataset_hash_reflects_content() {
        let (images, labels) = tiny_images();
        let ds1 = load_idx(
            &encode_idx_images(&images, 2, 3),
            &encode_idx_labels(&labels),
            "a",
        )
        .unwrap();
        let ds2 = load_idx(
            &encode_idx_images(&images, 2, 3),
            &encode_idx_labels(&labels),
            "b",
        )
        .unwrap();
        // Same content, same hash regardless of name.
        assert_eq!(ds1.hash, ds2.hash);
        let mut images2 = images.clone();
        images2[0][0] ^= 1;
        let ds3 = load_idx(
            &encode_idx_images(&images2, 2, 3),
            &encode_idx_labels(&labels),
            "a",
        )
        .unwrap();
        assert_ne!(ds1.hash, ds3.hash);
    }

    #[test]
    fn synth_grid_shape_and_determinism() {
        let (train1, grid1) = synth_2d(SynthKind::Clusters, 300, 9000, 7).unwrap();
        let (train2, grid2) = synth_2d(SynthKind::Clusters, 300, 9000, 7).unwrap();
        assert_eq!(train1.inputs, train2.inputs);
        assert_eq!(train1.labels, train2.labels);
        assert_eq!(grid1.inputs, grid2.inputs);
        assert_eq!(grid1.len(), 9000);
        // ceil(sqrt(9000)) = 95; uniform spacing along rows.
        let d01 = grid1.inputs.get(0, 0) - grid1.inputs.get(1, 0);
        let d12 = grid1.inputs.get(1, 0) - grid1.inputs.get(2, 0);
        assert!((d01 - d12).abs() < 1e-12);
        let (_t3, grid3) = synth_2d(SynthKind::Moons, 100, 10, 3).unwrap();
        assert_eq!(grid3.len(), 10);
    }

    #[test]
    fn synth_unknown_kind_rejected() {
        assert!(SynthKind::parse("spirals").is_err());
    }

    #[test]
    fn noise_variance_matches_request() {
        let spec = NoiseSpec {
            kind: NoiseKind::Observational,
            sn_ratio: 4.0,
            seed: 99,
        };
        let n = 100_000;
        let v = vec![0.0; n];
        let out = inject_noise(&v, &spec, 2.0).unwrap();
        let var: f64 = out.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let expect = 2.0 / 4.0;
        assert!((var - expect).abs() / expect < 0.02, "var {var}");
    }

    #[test]
    fn noise_vanishes_at_huge_sn() {
        let spec = NoiseSpec {
            kind: NoiseKind::Dynamical,
            sn_ratio: 1e12,
            seed: 5,
        };
        let v = vec![1.0; 1000];
        let out = inject_noise(&v, &spec, 1.0).unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn noise_is_deterministic_and_pure() {
        let spec = NoiseSpec {
            kind: NoiseKind::Observational,
            sn_ratio: 10.0,
            seed: 42,
        };
        let v = vec![0.5; 16];
        let a = inject_noise(&v, &spec, 1.0).unwrap();
        let b = inject_noise(&v, &spec, 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(v, vec![0.5; 16], "input must not be mutated");
    }

    #[test]
    fn noise_rejects_bad_variance() {
        let spec = NoiseSpec {
            kind: NoiseKind::Observational,
            sn_ratio: 1.0,
            seed: 0,
        };
        assert!(inject_noise(&[1.0], &spec, 0.0).is_err());
        assert!(inject_noise(&[1.0], &spec, -1.0).is_err());
    }
}
