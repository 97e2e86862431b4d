//! Dataset I/O and synthesis: binary feature files, per-frame label files,
//! class maps, dataset manifests, and a seeded synthetic generator for
//! desk-scale experiments.
//!
//! # Feature file layout
//!
//! Little-endian throughout: magic `ASFF`, format version `u32`, frame
//! count `u32`, feature dimension `u32`, then `T·D` `f32` values in
//! frame-major order.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FEATURE_MAGIC: [u8; 4] = *b"ASFF";
const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"ASFF\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported feature format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated at byte {offset}: expected {expected} more bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: non-finite value at byte {offset} (frame {frame}, component {component})")]
    NonFinite {
        path: PathBuf,
        offset: usize,
        frame: usize,
        component: usize,
    },
    #[error("{path}: {found} bytes of trailing data after the payload")]
    TrailingData { path: PathBuf, found: usize },
    #[error("feature sequence must have at least one frame and one dimension (got {frames}x{dim})")]
    EmptyFeatures { frames: usize, dim: usize },
    #[error("{path}:{line}: {message}")]
    TextFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown class name \"{name}\"")]
    UnknownClass {
        path: PathBuf,
        line: usize,
        name: String,
    },
    #[error("{path}: expected {expected} label lines, found {actual}")]
    LabelCount {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("class map is invalid: {0}")]
    BadClassMap(String),
    #[error("{path}: manifest is not a JSON array of {{features, labels}} entries: {message}")]
    BadManifest { path: PathBuf, message: String },
    #[error("synthetic spec is invalid: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A `T×D` matrix of per-frame feature vectors, stored frame-major as
/// `f32`. Every value is finite and both dimensions are at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(DataError::EmptyFeatures { frames, dim });
        }
        assert_eq!(
            values.len(),
            frames * dim,
            "value buffer does not match {frames}x{dim}"
        );
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                path: PathBuf::from("<memory>"),
                offset: 16 + 4 * bad,
                frame: bad / dim,
                component: bad % dim,
            });
        }
        Ok(Self { frames, dim, values })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Copies into a `T×D` tensor of the requested scalar type.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let values = self.values.iter().map(|&v| S::from_f32(v)).collect();
        Tensor::from_vec(self.frames, self.dim, values).expect("dimensions are consistent")
    }
}

/// Writes a feature sequence in the binary layout described at the top of
/// this module.
pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| io_err(path, e));
    write(&FEATURE_MAGIC)?;
    write(&FEATURE_VERSION.to_le_bytes())?;
    write(&(seq.frames as u32).to_le_bytes())?;
    write(&(seq.dim as u32).to_le_bytes())?;
    for v in &seq.values {
        write(&v.to_le_bytes())?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Reads a binary feature file, reporting byte-precise errors for bad
/// magic, truncation, trailing data, and non-finite values.
pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    parse_features(path, &bytes)
}

fn parse_features(path: &Path, bytes: &[u8]) -> Result<FeatureSequence> {
    let take = |offset: usize, len: usize| -> Result<&[u8]> {
        if bytes.len() < offset + len {
            return Err(DataError::Truncated {
                path: path.to_path_buf(),
                offset,
                expected: len,
                actual: bytes.len().saturating_sub(offset),
            });
        }
        Ok(&bytes[offset..offset + len])
    };
    let magic = take(0, 4)?;
    if magic != FEATURE_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let read_u32 = |offset: usize| -> Result<u32> {
        let b = take(offset, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let version = read_u32(4)?;
    if version != FEATURE_VERSION {
        return Err(DataError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let frames = read_u32(8)? as usize;
    let dim = read_u32(12)? as usize;
    if frames == 0 || dim == 0 {
        return Err(DataError::EmptyFeatures { frames, dim });
    }
    let payload = take(16, frames * dim * 4)?;
    let expected_len = 16 + frames * dim * 4;
    if bytes.len() > expected_len {
        return Err(DataError::TrailingData {
            path: path.to_path_buf(),
            found: bytes.len() - expected_len,
        });
    }
    let mut values = Vec::with_capacity(frames * dim);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(DataError::NonFinite {
                path: path.to_path_buf(),
                offset: 16 + 4 * i,
                frame: i / dim,
                component: i % dim,
            });
        }
        values.push(v);
    }
    Ok(FeatureSequence { frames, dim, values })
}

/// Reads plain-text features: one whitespace-separated row of numbers per
/// frame. A converter for published pre-extracted features.
pub fn load_features_text(path: &Path) -> Result<FeatureSequence> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut values: Vec<f32> = Vec::new();
    let mut dim = 0usize;
    let mut frames = 0usize;
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let row: Vec<f32> = trimmed
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f32>().map_err(|e| DataError::TextFormat {
                    path: path.to_path_buf(),
                    line: index + 1,
                    message: format!("cannot parse \"{tok}\": {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if frames == 0 {
            dim = row.len();
        } else if row.len() != dim {
            return Err(DataError::TextFormat {
                path: path.to_path_buf(),
                line: index + 1,
                message: format!("row has {} values, expected {dim}", row.len()),
            });
        }
        if let Some(pos) = row.iter().position(|v| !v.is_finite()) {
            return Err(DataError::TextFormat {
                path: path.to_path_buf(),
                line: index + 1,
                message: format!("non-finite value in column {pos}"),
            });
        }
        values.extend_from_slice(&row);
        frames += 1;
    }
    if frames == 0 || dim == 0 {
        return Err(DataError::EmptyFeatures { frames, dim });
    }
    Ok(FeatureSequence { frames, dim, values })
}

/// Loads a feature file in either format, deciding by content: files that
/// begin with the binary magic are parsed as binary, everything else as
/// text.
pub fn load_features_auto(path: &Path) -> Result<FeatureSequence> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut head = [0u8; 4];
    let mut reader = BufReader::new(file);
    let got = reader.read(&mut head).map_err(|e| io_err(path, e))?;
    if got == 4 && head == FEATURE_MAGIC {
        load_features(path)
    } else {
        load_features_text(path)
    }
}

/// Bijection between class indices `0..C` and unique, non-empty class
/// names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
    indices: HashMap<String, usize>,
}

impl ClassMap {
    pub fn from_names<I, T>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(DataError::BadClassMap("no classes".into()));
        }
        let mut indices = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(DataError::BadClassMap(format!("class {i} has an empty name")));
            }
            if name.chars().any(char::is_whitespace) {
                return Err(DataError::BadClassMap(format!(
                    "class name \"{name}\" contains whitespace"
                )));
            }
            if indices.insert(name.clone(), i).is_some() {
                return Err(DataError::BadClassMap(format!("duplicate class name \"{name}\"")));
            }
        }
        Ok(Self { names, indices })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.indices.get(name).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Reads lines of `<index> <name>`; indices must run 0..C−1 in order.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut names = Vec::new();
        for (index, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| DataError::TextFormat {
                path: path.to_path_buf(),
                line: index + 1,
                message,
            };
            let (id, name) = line
                .trim()
                .split_once(' ')
                .ok_or_else(|| bad("expected \"<index> <name>\"".into()))?;
            let id: usize = id
                .parse()
                .map_err(|e| bad(format!("bad class index \"{id}\": {e}")))?;
            if id != names.len() {
                return Err(bad(format!("class index {id} out of order, expected {}", names.len())));
            }
            names.push(name.trim().to_string());
        }
        ClassMap::from_names(names)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, name) in self.names.iter().enumerate() {
            out.push_str(&format!("{i} {name}\n"));
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }
}

/// Reads one class name per line, mapping each to its index. The sequence
/// length is whatever the file holds; pair with [`load_labels`] when the
/// frame count is known in advance.
pub fn load_label_file(path: &Path, classes: &ClassMap) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut labels = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        let label = classes.index(name).ok_or_else(|| DataError::UnknownClass {
            path: path.to_path_buf(),
            line: index + 1,
            name: name.to_string(),
        })?;
        labels.push(label);
    }
    Ok(labels)
}

/// Like [`load_label_file`], but the line count must equal
/// `expected_frames` — the invariant tying a label file to its feature
/// sequence.
pub fn load_labels(path: &Path, classes: &ClassMap, expected_frames: usize) -> Result<Vec<usize>> {
    let labels = load_label_file(path, classes)?;
    if labels.len() != expected_frames {
        return Err(DataError::LabelCount {
            path: path.to_path_buf(),
            expected: expected_frames,
            actual: labels.len(),
        });
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[usize], classes: &ClassMap) -> Result<()> {
    let mut out = String::new();
    for &label in labels {
        assert!(label < classes.len(), "label {label} outside the class map");
        out.push_str(classes.name(label));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// One video in a dataset manifest. Relative paths are resolved against
/// the manifest's directory at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub features: PathBuf,
    pub labels: PathBuf,
}

/// Reads a JSON array of `{features, labels}` entries.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| DataError::BadManifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for entry in &mut entries {
        if entry.features.is_relative() {
            entry.features = base.join(&entry.features);
        }
        if entry.labels.is_relative() {
            entry.labels = base.join(&entry.labels);
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).expect("manifest entries serialize");
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Recipe for a synthetic dataset: a segment-level Markov chain over
/// classes with Gaussian per-frame features around fixed class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Row-stochastic `C×C` matrix with a zero diagonal, so adjacent
    /// segments always change label.
    pub transition: Vec<Vec<f64>>,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_sigma: f64,
    pub mean_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// A uniform off-diagonal transition matrix over `num_classes` classes.
    pub fn uniform(num_classes: usize, feature_dim: usize) -> Self {
        let off = 1.0 / (num_classes - 1) as f64;
        let transition = (0..num_classes)
            .map(|i| {
                (0..num_classes)
                    .map(|j| if i == j { 0.0 } else { off })
                    .collect()
            })
            .collect();
        Self {
            num_classes,
            feature_dim,
            transition,
            min_len: 8,
            max_len: 32,
            noise_sigma: 1.0,
            mean_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Err(DataError::InvalidSpec(message));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be at least 1".into());
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return fail(format!(
                "segment length range [{}, {}] is invalid",
                self.min_len, self.max_len
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !self.mean_scale.is_finite() {
            return fail(format!("mean_scale {} must be finite", self.mean_scale));
        }
        if self.transition.len() != self.num_classes {
            return fail(format!(
                "transition matrix has {} rows, expected {}",
                self.transition.len(),
                self.num_classes
            ));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != self.num_classes {
                return fail(format!(
                    "transition row {i} has {} entries, expected {}",
                    row.len(),
                    self.num_classes
                ));
            }
            if row[i] != 0.0 {
                return fail(format!("transition diagonal entry {i} is {}, must be 0", row[i]));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return fail(format!("transition row {i} has entries outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return fail(format!("transition row {i} sums to {sum}, expected 1"));
            }
        }
        Ok(())
    }
}

fn sample_class(row: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_possible = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_possible = j;
        }
        cumulative += p;
        if u < cumulative {
            return j;
        }
    }
    // Rounding can leave the cumulative sum a hair below 1; fall back to
    // the last class with any probability mass.
    last_possible
}

/// Generates `num_sequences` labelled sequences with lengths uniform in
/// `frames_range` (inclusive). Class means are drawn once from the spec's
/// seed, so the same spec always produces bit-identical data.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    num_sequences: usize,
    frames_range: (usize, usize),
) -> Result<Vec<(FeatureSequence, Vec<usize>)>> {
    spec.validate()?;
    let (min_frames, max_frames) = frames_range;
    if min_frames < 1 || max_frames < min_frames {
        return Err(DataError::InvalidSpec(format!(
            "frame count range [{min_frames}, {max_frames}] is invalid"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let means: Vec<f64> = (0..spec.num_classes * spec.feature_dim)
        .map(|_| {
            let n: f64 = rng.sample(StandardNormal);
            n * spec.mean_scale
        })
        .collect();
    let mut out = Vec::with_capacity(num_sequences);
    for _ in 0..num_sequences {
        let frames = rng.random_range(min_frames..=max_frames);
        let mut labels: Vec<usize> = Vec::with_capacity(frames);
        let mut class = rng.random_range(0..spec.num_classes);
        while labels.len() < frames {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let take = len.min(frames - labels.len());
            labels.extend(std::iter::repeat(class).take(take));
            if labels.len() < frames {
                class = sample_class(&spec.transition[class], &mut rng);
            }
        }
        let mut values = Vec::with_capacity(frames * spec.feature_dim);
        for &label in &labels {
            let mean = &means[label * spec.feature_dim..(label + 1) * spec.feature_dim];
            for &m in mean {
                let n: f64 = rng.sample(StandardNormal);
                values.push((m + spec.noise_sigma * n) as f32);
            }
        }
        let seq = FeatureSequence::new(frames, spec.feature_dim, values)?;
        out.push((seq, labels));
    }
    Ok(out)
}
