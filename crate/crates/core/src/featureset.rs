//! Labeled embedding matrices, their on-disk formats, synthetic generation
//! and class-incremental task splitting.
//!
//! Features live on disk as 32-bit floats and are promoted to `f64` on load.
//! Labels are always re-indexed to contiguous `0..class_count` ids; the
//! original ids are kept in [`FeatureSet::original_ids`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ErrorCategory;

pub const FEATSET_MAGIC: &[u8; 4] = b"FSET";
pub const FEATSET_VERSION: u8 = 1;
const HEADER_LEN: u64 = 4 + 1 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte 0: expected \"FSET\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported FEATSET version {0} at byte 4 (expected 1)")]
    UnsupportedVersion(u8),
    #[error("truncated file: expected {expected} bytes, found {actual} (record {record} cut at byte {offset})")]
    Truncated {
        expected: u64,
        actual: u64,
        record: u64,
        offset: u64,
    },
    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("empty feature set: n_samples = {n_samples}, dim = {dim}")]
    Empty { n_samples: usize, dim: usize },
    #[error("non-finite value {value} in sample {sample}, feature {feature} (byte {offset})")]
    NonFiniteBinary {
        sample: usize,
        feature: usize,
        offset: u64,
        value: f32,
    },
    #[error("non-finite value in row {row}, column {column}")]
    NonFiniteRow { row: usize, column: usize },
    #[error("header declares {declared} classes but only {present} labels occur (empty class)")]
    EmptyClass { declared: usize, present: usize },
    #[error("header declares {declared} classes but {present} distinct labels occur")]
    ClassCountMismatch { declared: usize, present: usize },
    #[error("bad CSV header: {0}")]
    BadHeader(String),
    #[error("row {row}: expected {expected} fields, found {found}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },
    #[error("row {row}, column {column}: cannot parse {value:?}")]
    Parse { row: usize, column: usize, value: String },
    #[error("row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("invalid feature set: {0}")]
    Invalid(String),
}

impl LoadError {
    pub fn category(&self) -> ErrorCategory {
        ErrorCategory::Data
    }
}

/// One labeled embedding borrowed from a [`FeatureSet`] (or any other
/// row-major store).
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub z: &'a [f64],
    pub label: usize,
}

/// Labeled embedding matrix, `n_samples x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: Vec<f64>,
    labels: Vec<usize>,
    class_count: usize,
    dim: usize,
    original_ids: Vec<u32>,
}

impl FeatureSet {
    /// Builds a feature set from raw labels, re-indexing them to contiguous
    /// ids in ascending order of the raw id.
    pub fn from_raw_labels(features: Vec<f64>, raw_labels: &[u32], dim: usize) -> Result<Self, LoadError> {
        let original_ids: Vec<u32> = {
            let mut ids = raw_labels.to_vec();
            ids.sort_unstable();
            ids.dedup();
            ids
        };
        let index: BTreeMap<u32, usize> = original_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let labels = raw_labels.iter().map(|id| index[id]).collect();
        Self::with_original_ids(features, labels, dim, original_ids)
    }

    /// Builds a feature set whose labels are already contiguous.
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self, LoadError> {
        let class_count = labels.iter().copied().max().map_or(0, |m| m + 1);
        let original_ids = (0..class_count as u32).collect();
        Self::with_original_ids(features, labels, dim, original_ids)
    }

    fn with_original_ids(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        original_ids: Vec<u32>,
    ) -> Result<Self, LoadError> {
        let n = labels.len();
        if n == 0 || dim == 0 {
            return Err(LoadError::Empty { n_samples: n, dim });
        }
        if features.len() != n * dim {
            return Err(LoadError::Invalid(format!(
                "feature buffer holds {} values, expected {} x {}",
                features.len(),
                n,
                dim
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(LoadError::NonFiniteRow {
                row: pos / dim,
                column: pos % dim,
            });
        }
        let class_count = original_ids.len();
        let mut seen = vec![false; class_count];
        for &l in &labels {
            if l >= class_count {
                return Err(LoadError::Invalid(format!("label {l} outside 0..{class_count}")));
            }
            seen[l] = true;
        }
        let present = seen.iter().filter(|&&s| s).count();
        if present != class_count {
            return Err(LoadError::EmptyClass {
                declared: class_count,
                present,
            });
        }
        Ok(FeatureSet {
            features,
            labels,
            class_count,
            dim,
            original_ids,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// `original_ids()[label]` is the id the label had in the source file.
    pub fn original_ids(&self) -> &[u32] {
        &self.original_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            z: self.row(i),
            label: self.labels[i],
        }
    }

    /// Sample indices grouped by class, ascending within each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Copy with every row scaled to unit L2 norm. Zero rows stay zero.
    pub fn l2_normalized(&self) -> FeatureSet {
        let mut features = self.features.clone();
        for row in features.chunks_mut(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        FeatureSet {
            features,
            ..self.clone()
        }
    }

    /// Parses a FEATSET byte buffer.
    pub fn from_featset_bytes(bytes: &[u8]) -> Result<Self, LoadError> {
        let actual = bytes.len() as u64;
        if actual < 5 {
            return Err(LoadError::Truncated {
                expected: HEADER_LEN,
                actual,
                record: 0,
                offset: actual,
            });
        }
        if &bytes[0..4] != FEATSET_MAGIC {
            return Err(LoadError::BadMagic {
                found: bytes[0..4].to_vec(),
            });
        }
        if bytes[4] != FEATSET_VERSION {
            return Err(LoadError::UnsupportedVersion(bytes[4]));
        }
        if actual < HEADER_LEN {
            return Err(LoadError::Truncated {
                expected: HEADER_LEN,
                actual,
                record: 0,
                offset: actual,
            });
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let n = u32_at(5) as usize;
        let dim = u32_at(9) as usize;
        let declared = u32_at(13) as usize;
        if n == 0 || dim == 0 {
            return Err(LoadError::Empty { n_samples: n, dim });
        }
        let record_len = 4 + 4 * dim as u64;
        let expected = HEADER_LEN + n as u64 * record_len;
        if actual < expected {
            let record = (actual - HEADER_LEN) / record_len;
            return Err(LoadError::Truncated {
                expected,
                actual,
                record,
                offset: HEADER_LEN + record * record_len,
            });
        }
        if actual > expected {
            return Err(LoadError::TrailingBytes { expected, actual });
        }

        let mut raw_labels = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * dim);
        let mut off = HEADER_LEN as usize;
        for sample in 0..n {
            raw_labels.push(u32_at(off));
            off += 4;
            for feature in 0..dim {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                if !v.is_finite() {
                    return Err(LoadError::NonFiniteBinary {
                        sample,
                        feature,
                        offset: off as u64,
                        value: v,
                    });
                }
                features.push(v as f64);
                off += 4;
            }
        }
        check_declared_classes(&raw_labels, declared)?;
        Self::from_raw_labels(features, &raw_labels, dim)
    }

    /// Parses the labeled CSV format: header `label,f0,...,f{dim-1}`.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self, LoadError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| LoadError::BadHeader(e.to_string()))?.clone();
        if header.len() < 2 || header.get(0).map(str::trim) != Some("label") {
            return Err(LoadError::BadHeader("expected `label,f0,...,f{dim-1}`".to_string()));
        }
        for (j, name) in header.iter().skip(1).enumerate() {
            if name.trim() != format!("f{j}") {
                return Err(LoadError::BadHeader(format!(
                    "column {} is {:?}, expected \"f{}\"",
                    j + 1,
                    name,
                    j
                )));
            }
        }
        let dim = header.len() - 1;
        let mut raw_labels = Vec::new();
        let mut features = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            // row numbers are 1-based and count the header as row 1
            let row = i + 2;
            let record = record.map_err(|e| match e.kind() {
                csv::ErrorKind::UnequalLengths { len, .. } => LoadError::DimensionMismatch {
                    row,
                    expected: dim + 1,
                    found: *len as usize,
                },
                _ => LoadError::Csv {
                    row,
                    message: e.to_string(),
                },
            })?;
            let label_field = record.get(0).unwrap_or("").trim();
            let label: u32 = label_field.parse().map_err(|_| LoadError::Parse {
                row,
                column: 0,
                value: label_field.to_string(),
            })?;
            raw_labels.push(label);
            for (j, field) in record.iter().skip(1).enumerate() {
                let field = field.trim();
                let v: f32 = field.parse().map_err(|_| LoadError::Parse {
                    row,
                    column: j + 1,
                    value: field.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(LoadError::NonFiniteRow { row, column: j + 1 });
                }
                features.push(v as f64);
            }
        }
        if raw_labels.is_empty() {
            return Err(LoadError::Empty { n_samples: 0, dim });
        }
        Self::from_raw_labels(features, &raw_labels, dim)
    }

    /// Loads a FEATSET or CSV file, sniffing the format from the magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LoadError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| LoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if bytes.starts_with(FEATSET_MAGIC) {
            Self::from_featset_bytes(&bytes)
        } else {
            Self::from_csv_reader(bytes.as_slice())
        }
    }

    /// Serializes to FEATSET. Labels are written as their original ids.
    pub fn to_featset_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN as usize + self.n_samples() * (4 + 4 * self.dim));
        out.extend_from_slice(FEATSET_MAGIC);
        out.push(FEATSET_VERSION);
        out.extend_from_slice(&(self.n_samples() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.class_count as u32).to_le_bytes());
        for i in 0..self.n_samples() {
            out.extend_from_slice(&self.original_ids[self.labels[i]].to_le_bytes());
            for &v in self.row(i) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), LoadError> {
        let to_err = |e: csv::Error| LoadError::Csv {
            row: 0,
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim).map(|j| format!("f{j}")));
        w.write_record(&header).map_err(to_err)?;
        for i in 0..self.n_samples() {
            let mut rec = vec![self.original_ids[self.labels[i]].to_string()];
            rec.extend(self.row(i).iter().map(|&v| (v as f32).to_string()));
            w.write_record(&rec).map_err(to_err)?;
        }
        w.flush().map_err(|e| LoadError::Csv {
            row: 0,
            message: e.to_string(),
        })
    }

    /// Writes CSV when the extension is `.csv`, FEATSET otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LoadError> {
        let path = path.as_ref();
        let io_err = |source| LoadError::Io {
            path: path.display().to_string(),
            source,
        };
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            let file = std::fs::File::create(path).map_err(io_err)?;
            self.write_csv(std::io::BufWriter::new(file))
        } else {
            std::fs::write(path, self.to_featset_bytes()).map_err(io_err)
        }
    }
}

fn check_declared_classes(raw_labels: &[u32], declared: usize) -> Result<(), LoadError> {
    let mut ids = raw_labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    match ids.len().cmp(&declared) {
        std::cmp::Ordering::Less => Err(LoadError::EmptyClass {
            declared,
            present: ids.len(),
        }),
        std::cmp::Ordering::Greater => Err(LoadError::ClassCountMismatch {
            declared,
            present: ids.len(),
        }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

/// Parameters of the isotropic Gaussian mixture used as a stand-in for
/// frozen-encoder embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub class_count: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub mean_scale: f64,
    pub within_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.class_count < 2 {
            return Err(format!("class_count must be >= 2, got {}", self.class_count));
        }
        if self.samples_per_class < 2 {
            return Err(format!(
                "samples_per_class must be >= 2, got {}",
                self.samples_per_class
            ));
        }
        if self.dim < 1 {
            return Err("dim must be >= 1".to_string());
        }
        if !(self.mean_scale.is_finite() && self.mean_scale > 0.0) {
            return Err(format!("mean_scale must be > 0, got {}", self.mean_scale));
        }
        if !(self.within_std.is_finite() && self.within_std > 0.0) {
            return Err(format!("within_std must be > 0, got {}", self.within_std));
        }
        Ok(())
    }
}

/// Draws a synthetic feature set and returns it with the generating class
/// means (`class_count x dim`, row-major).
///
/// Means are drawn once, uniformly on the sphere of radius `mean_scale`;
/// every sample is `mean + within_std * N(0, I)`. All values are rounded to
/// `f32` precision so that the result survives a FEATSET round trip.
pub fn generate_synthetic_with_means(spec: &SynthSpec) -> Result<(FeatureSet, Vec<f64>), String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let mut means = Vec::with_capacity(spec.class_count * d);
    for _ in 0..spec.class_count {
        let dir: Vec<f64> = loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        };
        means.extend(dir.iter().map(|x| (x * spec.mean_scale) as f32 as f64));
    }
    let n = spec.class_count * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.class_count {
        let mean = &means[c * d..(c + 1) * d];
        for _ in 0..spec.samples_per_class {
            for &m in mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push((m + spec.within_std * noise) as f32 as f64);
            }
            labels.push(c);
        }
    }
    let fs = FeatureSet::new(features, labels, d).map_err(|e| e.to_string())?;
    Ok((fs, means))
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<FeatureSet, String> {
    generate_synthetic_with_means(spec).map(|(fs, _)| fs)
}

/// One phase of a task stream: its classes and every sample of those classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub classes: Vec<usize>,
    pub samples: Vec<usize>,
}

/// Ordered class-incremental phases over a [`FeatureSet`]. Phase 0 is the
/// base phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub phases: Vec<Phase>,
    pub memory_per_class: usize,
    pub base_fraction: f64,
}

impl TaskStream {
    /// Number of incremental phases after the base phase.
    pub fn incremental_phases(&self) -> usize {
        self.phases.len().saturating_sub(1)
    }

    /// Class ids in stream order (base classes first).
    pub fn class_order(&self) -> Vec<usize> {
        self.phases.iter().flat_map(|p| p.classes.iter().copied()).collect()
    }

    /// Checks that the stream partitions `fs`: disjoint, exhaustive class
    /// sets and every sample in exactly the phase of its class.
    pub fn validate(&self, fs: &FeatureSet) -> Result<(), String> {
        if self.phases.is_empty() {
            return Err("task stream has no phases".to_string());
        }
        let c = fs.class_count();
        let mut phase_of_class = vec![None; c];
        for (t, phase) in self.phases.iter().enumerate() {
            if phase.classes.is_empty() {
                return Err(format!("phase {t} has no classes"));
            }
            for &k in &phase.classes {
                if k >= c {
                    return Err(format!("phase {t} names class {k}, feature set has {c}"));
                }
                if let Some(prev) = phase_of_class[k] {
                    return Err(format!("class {k} appears in phases {prev} and {t}"));
                }
                phase_of_class[k] = Some(t);
            }
        }
        if let Some(k) = phase_of_class.iter().position(Option::is_none) {
            return Err(format!("class {k} is not assigned to any phase"));
        }
        let mut seen = vec![false; fs.n_samples()];
        for (t, phase) in self.phases.iter().enumerate() {
            for &i in &phase.samples {
                if i >= fs.n_samples() {
                    return Err(format!(
                        "phase {t} names sample {i}, feature set has {}",
                        fs.n_samples()
                    ));
                }
                if seen[i] {
                    return Err(format!("sample {i} appears more than once"));
                }
                seen[i] = true;
                if phase_of_class[fs.labels()[i]] != Some(t) {
                    return Err(format!("sample {i} (class {}) listed in phase {t}", fs.labels()[i]));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(format!("sample {i} is not assigned to any phase"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| crate::Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| crate::Error::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("task stream serializes");
        std::fs::write(path, text + "\n").map_err(|source| crate::Error::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Splits `fs` into a base phase holding `base_fraction` of the classes and
/// `phase_count` equal incremental blocks.
///
/// Classes are taken in ascending id order, or in a seeded permutation when
/// `shuffle_seed` is given.
pub fn split_tasks(
    fs: &FeatureSet,
    phase_count: usize,
    base_fraction: f64,
    memory_per_class: usize,
    shuffle_seed: Option<u64>,
) -> crate::Result<TaskStream> {
    let c = fs.class_count();
    if !(base_fraction > 0.0 && base_fraction <= 1.0) {
        return Err(crate::Error::Config(format!(
            "base_fraction must lie in (0, 1], got {base_fraction}"
        )));
    }
    let exact = c as f64 * base_fraction;
    let base = exact.round();
    if (exact - base).abs() > 1e-9 || base < 1.0 {
        return Err(crate::Error::Config(format!(
            "{c} classes x base_fraction {base_fraction} = {exact}, not a positive integer"
        )));
    }
    let base = base as usize;
    let rest = c - base;
    if phase_count == 0 && rest > 0 {
        return Err(crate::Error::Config(format!(
            "{rest} classes remain after the base phase but 0 incremental phases were requested"
        )));
    }
    if phase_count > 0 && (rest == 0 || !rest.is_multiple_of(phase_count)) {
        return Err(crate::Error::Config(format!(
            "{rest} remaining classes ({c} - {base}) cannot be split into {phase_count} equal non-empty phases"
        )));
    }
    let mut order: Vec<usize> = (0..c).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let by_class = fs.class_indices();
    let block = rest.checked_div(phase_count).unwrap_or(0);
    let mut phases = Vec::with_capacity(phase_count + 1);
    let mut start = 0;
    for t in 0..=phase_count {
        let size = if t == 0 { base } else { block };
        let classes = order[start..start + size].to_vec();
        start += size;
        let mut samples: Vec<usize> = classes.iter().flat_map(|&k| by_class[k].iter().copied()).collect();
        samples.sort_unstable();
        phases.push(Phase { classes, samples });
    }
    Ok(TaskStream {
        phases,
        memory_per_class,
        base_fraction,
    })
}
