//! Incremental prototype classifier.
//!
//! Each class owns one prototype vector. Class posteriors are a softmax over
//! negative squared Euclidean distances scaled by `gamma`, training minimizes
//! `CE + lambda * ||z - phi_y||^2` averaged over the minibatch, and the
//! prototypes of classes learned in earlier phases are frozen: they still
//! take part in the softmax normalizer but receive no updates.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featureset::Sample;
use crate::optim::{Momentum, Objective, TrainConfig};
use crate::ErrorCategory;

pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.3;

const CHECKPOINT_MAGIC: &[u8; 4] = b"IPC1";
const CHECKPOINT_HEADER: usize = 4 + 4 + 4 + 4 + 8 + 8;

#[derive(Debug, Error)]
pub enum IpcError {
    #[error("dimension mismatch: classifier has dim {expected}, input has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} prototypes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class index {index} out of range for {classes} prototypes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("phase has no training data")]
    EmptyData,
    #[error("class {0} already has a prototype")]
    ClassOverlap(usize),
    #[error("new classes must be the next contiguous ids starting at {expected}, got {found:?}")]
    NonContiguousClasses { expected: usize, found: Vec<usize> },
    #[error("new class {0} has no samples in the phase data")]
    MissingClassData(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("training diverged: non-finite prototype after epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl IpcError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            IpcError::InvalidParameter(_) => ErrorCategory::Usage,
            IpcError::Diverged { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }
}

/// Mean batch losses: `total = ce + lambda * pl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeClassifier {
    dim: usize,
    prototypes: Vec<f64>,
    frozen_count: usize,
    gamma: f64,
    lambda: f64,
}

fn check_hyper(gamma: f64, lambda: f64) -> Result<(), IpcError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(IpcError::InvalidParameter(format!("gamma must be > 0, got {gamma}")));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(IpcError::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PrototypeClassifier {
    /// Empty classifier (no classes yet).
    pub fn new(dim: usize, gamma: f64, lambda: f64) -> Result<Self, IpcError> {
        check_hyper(gamma, lambda)?;
        if dim == 0 {
            return Err(IpcError::InvalidParameter("dim must be >= 1".into()));
        }
        Ok(PrototypeClassifier {
            dim,
            prototypes: Vec::new(),
            frozen_count: 0,
            gamma,
            lambda,
        })
    }

    pub fn from_prototypes(
        prototypes: Vec<f64>,
        dim: usize,
        frozen_count: usize,
        gamma: f64,
        lambda: f64,
    ) -> Result<Self, IpcError> {
        check_hyper(gamma, lambda)?;
        if dim == 0 || !prototypes.len().is_multiple_of(dim) {
            return Err(IpcError::InvalidParameter(format!(
                "{} prototype values do not form rows of dim {dim}",
                prototypes.len()
            )));
        }
        let classes = prototypes.len() / dim;
        if frozen_count > classes {
            return Err(IpcError::InvalidParameter(format!(
                "frozen_count {frozen_count} exceeds {classes} prototypes"
            )));
        }
        if prototypes.iter().any(|v| !v.is_finite()) {
            return Err(IpcError::InvalidParameter("non-finite prototype entry".into()));
        }
        Ok(PrototypeClassifier {
            dim,
            prototypes,
            frozen_count,
            gamma,
            lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.len() / self.dim
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen_count
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn prototypes(&self) -> &[f64] {
        &self.prototypes
    }

    pub fn prototype(&self, i: usize) -> &[f64] {
        &self.prototypes[i * self.dim..(i + 1) * self.dim]
    }

    fn check_dim(&self, z: &[f64]) -> Result<(), IpcError> {
        if z.len() != self.dim {
            return Err(IpcError::DimensionMismatch {
                expected: self.dim,
                found: z.len(),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[Sample<'_>]) -> Result<(), IpcError> {
        if batch.is_empty() {
            return Err(IpcError::EmptyBatch);
        }
        let c = self.class_count();
        for s in batch {
            self.check_dim(s.z)?;
            if s.label >= c {
                return Err(IpcError::LabelOutOfRange {
                    label: s.label,
                    classes: c,
                });
            }
        }
        Ok(())
    }

    fn distances_unchecked(&self, z: &[f64]) -> Vec<f64> {
        self.prototypes.chunks(self.dim).map(|p| sq_dist(z, p)).collect()
    }

    /// Squared Euclidean distance from `z` to every prototype.
    pub fn distances(&self, z: &[f64]) -> Result<Vec<f64>, IpcError> {
        self.check_dim(z)?;
        Ok(self.distances_unchecked(z))
    }

    /// Distance softmax `exp(-gamma d_i) / sum_k exp(-gamma d_k)`, shifted by
    /// the minimum distance before exponentiation.
    pub fn posterior(&self, z: &[f64]) -> Result<Vec<f64>, IpcError> {
        self.check_dim(z)?;
        let d = self.distances_unchecked(z);
        Ok(softmax_neg(&d, self.gamma).0)
    }

    pub fn hybrid_loss(&self, batch: &[Sample<'_>]) -> Result<LossBreakdown, IpcError> {
        self.check_batch(batch)?;
        Ok(self.loss_and_gradient(batch, Objective::Hybrid, false).0)
    }

    /// Gradient of the mean hybrid loss with respect to the prototype matrix
    /// (`C x d`, row-major). Frozen rows are exactly zero.
    pub fn loss_gradient(&self, batch: &[Sample<'_>]) -> Result<Vec<f64>, IpcError> {
        self.loss_gradient_for(batch, Objective::Hybrid)
    }

    pub fn loss_gradient_for(&self, batch: &[Sample<'_>], objective: Objective) -> Result<Vec<f64>, IpcError> {
        self.check_batch(batch)?;
        Ok(self.loss_and_gradient(batch, objective, true).1)
    }

    fn loss_and_gradient(
        &self,
        batch: &[Sample<'_>],
        objective: Objective,
        want_grad: bool,
    ) -> (LossBreakdown, Vec<f64>) {
        let c = self.class_count();
        let d = self.dim;
        let mut grad = if want_grad { vec![0.0; c * d] } else { Vec::new() };
        let mut ce_sum = 0.0;
        let mut pl_sum = 0.0;
        for s in batch {
            let dist = self.distances_unchecked(s.z);
            let (p, log_norm, d_min) = softmax_neg(&dist, self.gamma);
            ce_sum += self.gamma * (dist[s.label] - d_min) + log_norm;
            pl_sum += dist[s.label];
            if !want_grad {
                continue;
            }
            for i in self.frozen_count..c {
                let target = if i == s.label { 1.0 } else { 0.0 };
                let coef = match objective {
                    Objective::Hybrid => 2.0 * self.gamma * (target - p[i]) + 2.0 * self.lambda * target,
                    Objective::PrototypeOnly => 2.0 * target,
                };
                if coef == 0.0 {
                    continue;
                }
                let proto = &self.prototypes[i * d..(i + 1) * d];
                for ((g, &phi), &zk) in grad[i * d..(i + 1) * d].iter_mut().zip(proto).zip(s.z) {
                    *g += coef * (phi - zk);
                }
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        let ce = ce_sum / n;
        let pl = pl_sum / n;
        (
            LossBreakdown {
                ce,
                pl,
                total: ce + self.lambda * pl,
            },
            grad,
        )
    }

    /// Nearest prototype; ties go to the lowest class id.
    pub fn predict(&self, z: &[f64]) -> Result<usize, IpcError> {
        self.check_dim(z)?;
        if self.class_count() == 0 {
            return Err(IpcError::EmptyData);
        }
        Ok(argmin(&self.distances_unchecked(z)))
    }

    /// `g_i(z) = 2 phi_i.z - phi_i.phi_i - z.z`, which equals `-d_i(z)`.
    pub fn linear_discriminant(&self, z: &[f64], i: usize) -> Result<f64, IpcError> {
        self.check_dim(z)?;
        if i >= self.class_count() {
            return Err(IpcError::IndexOutOfRange {
                index: i,
                classes: self.class_count(),
            });
        }
        let phi = self.prototype(i);
        Ok(2.0 * dot(phi, z) - dot(phi, phi) - dot(z, z))
    }

    /// Adds prototypes for `new_classes` (initialized at their class means in
    /// `data`), optimizes them on `data` and freezes every prototype.
    ///
    /// `data` may include replayed samples of old classes; those shape the
    /// softmax but old prototypes never move. Returns the mean loss seen
    /// during each epoch.
    pub fn train_phase(
        &mut self,
        data: &[Sample<'_>],
        new_classes: &[usize],
        cfg: &TrainConfig,
    ) -> Result<Vec<LossBreakdown>, IpcError> {
        cfg.validate().map_err(IpcError::InvalidParameter)?;
        if data.is_empty() {
            return Err(IpcError::EmptyData);
        }
        let start = self.class_count();
        if let Some(&k) = new_classes.iter().find(|&&k| k < start) {
            return Err(IpcError::ClassOverlap(k));
        }
        if new_classes.is_empty() || new_classes.iter().enumerate().any(|(j, &k)| k != start + j) {
            return Err(IpcError::NonContiguousClasses {
                expected: start,
                found: new_classes.to_vec(),
            });
        }
        let total = start + new_classes.len();
        for s in data {
            self.check_dim(s.z)?;
            if s.label >= total {
                return Err(IpcError::LabelOutOfRange {
                    label: s.label,
                    classes: total,
                });
            }
        }

        let d = self.dim;
        let mut sums = vec![0.0; new_classes.len() * d];
        let mut counts = vec![0usize; new_classes.len()];
        for s in data.iter().filter(|s| s.label >= start) {
            let j = s.label - start;
            counts[j] += 1;
            sums[j * d..(j + 1) * d].iter_mut().zip(s.z).for_each(|(a, z)| *a += z);
        }
        if let Some(j) = counts.iter().position(|&n| n == 0) {
            return Err(IpcError::MissingClassData(start + j));
        }
        let snapshot = self.clone();
        for (row, &n) in sums.chunks(d).zip(&counts) {
            self.prototypes.extend(row.iter().map(|v| v / n as f64));
        }
        self.frozen_count = start;
        match self.fit_trainable(data, cfg) {
            Ok(trace) => {
                self.frozen_count = total;
                Ok(trace)
            }
            Err(e) => {
                *self = snapshot;
                Err(e)
            }
        }
    }

    /// Runs minibatch SGD with momentum on the rows at or above
    /// `frozen_count`, leaving the frozen rows untouched.
    pub fn fit_trainable(&mut self, data: &[Sample<'_>], cfg: &TrainConfig) -> Result<Vec<LossBreakdown>, IpcError> {
        cfg.validate().map_err(IpcError::InvalidParameter)?;
        self.check_batch(data)?;
        let d = self.dim;
        let first = self.frozen_count * d;
        let mut opt = Momentum::new(self.prototypes.len() - first, cfg.momentum);
        let mut trace = Vec::with_capacity(cfg.epochs);
        let mut batch: Vec<Sample<'_>> = Vec::with_capacity(cfg.batch_size);
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr_at(epoch);
            let mut acc = LossBreakdown {
                ce: 0.0,
                pl: 0.0,
                total: 0.0,
            };
            for idx in cfg.epoch_batches(data.len(), epoch) {
                batch.clear();
                batch.extend(idx.iter().map(|&i| data[i]));
                let (loss, grad) = self.loss_and_gradient(&batch, cfg.objective, true);
                let w = batch.len() as f64 / data.len() as f64;
                acc.ce += w * loss.ce;
                acc.pl += w * loss.pl;
                acc.total += w * loss.total;
                opt.step(&mut self.prototypes[first..], &grad[first..], lr);
            }
            if self.prototypes[first..].iter().any(|v| !v.is_finite()) {
                return Err(IpcError::Diverged { epoch });
            }
            trace.push(acc);
        }
        Ok(trace)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER + 8 * self.prototypes.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.class_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.frozen_count as u32).to_le_bytes());
        out.extend_from_slice(&self.gamma.to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        for v in &self.prototypes {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, IpcError> {
        if bytes.len() < CHECKPOINT_HEADER {
            return Err(IpcError::Checkpoint(format!(
                "header needs {CHECKPOINT_HEADER} bytes, found {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(IpcError::Checkpoint("bad magic, expected \"IPC1\"".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (c, d, frozen) = (u32_at(4), u32_at(8), u32_at(12));
        let (gamma, lambda) = (f64_at(16), f64_at(24));
        let expected = CHECKPOINT_HEADER + 8 * c * d;
        if bytes.len() != expected {
            return Err(IpcError::Checkpoint(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let prototypes = (0..c * d).map(|k| f64_at(CHECKPOINT_HEADER + 8 * k)).collect();
        Self::from_prototypes(prototypes, d, frozen, gamma, lambda)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|source| crate::Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| crate::Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_checkpoint_bytes(&bytes)?)
    }
}

/// Returns `(p, ln sum_k exp(-gamma (d_k - d_min)), d_min)`.
fn softmax_neg(d: &[f64], gamma: f64) -> (Vec<f64>, f64, f64) {
    let d_min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = d.iter().map(|&di| (-gamma * (di - d_min)).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    (p, sum.ln(), d_min)
}

pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}
