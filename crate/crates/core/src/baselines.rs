//! Comparison heads: a standard linear softmax classifier, its cosine
//! normalized variant and the nearest-mean-of-exemplars classifier.
//!
//! Unlike the prototype classifier, the linear heads update every row in
//! every phase.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::featureset::Sample;
use crate::ipc::argmin;
use crate::optim::{Momentum, TrainConfig};
use crate::ErrorCategory;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("dimension mismatch: head has dim {expected}, input has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {0} has no available samples")]
    NoSamples(usize),
    #[error("empty training data")]
    EmptyData,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("training diverged: non-finite weight after epoch {epoch}")]
    Diverged { epoch: usize },
}

impl BaselineError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            BaselineError::InvalidParameter(_) => ErrorCategory::Usage,
            BaselineError::Diverged { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax linear head. With `normalized` set the logit of class `i` is the
/// cosine between `w_i` and `z`, and biases are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    normalized: bool,
}

impl LinearHead {
    pub fn new(dim: usize, normalized: bool) -> Self {
        LinearHead {
            dim,
            weights: Vec::new(),
            biases: Vec::new(),
            normalized,
        }
    }

    pub fn from_parts(
        weights: Vec<f64>,
        biases: Vec<f64>,
        dim: usize,
        normalized: bool,
    ) -> Result<Self, BaselineError> {
        if dim == 0 || weights.len() != biases.len() * dim {
            return Err(BaselineError::InvalidParameter(format!(
                "{} weights and {} biases do not form a head of dim {dim}",
                weights.len(),
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(BaselineError::InvalidParameter("non-finite entry".into()));
        }
        Ok(LinearHead {
            dim,
            weights,
            biases,
            normalized,
        })
    }

    pub fn class_count(&self) -> usize {
        self.biases.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> &[f64] {
        &self.weights[i * self.dim..(i + 1) * self.dim]
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Appends `count` rows: zeros for the plain head, seeded random unit
    /// vectors for the cosine head.
    pub fn grow(&mut self, count: usize, seed: u64) {
        let first = self.class_count();
        for k in 0..count {
            if self.normalized {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ ((first + k) as u64).wrapping_mul(0xA24B_AED4_963E_E407));
                let mut row: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = norm(&row);
                row.iter_mut().for_each(|v| *v /= n);
                self.weights.extend(row);
            } else {
                self.weights.extend(std::iter::repeat_n(0.0, self.dim));
            }
            self.biases.push(0.0);
        }
    }

    fn check_dim(&self, z: &[f64]) -> Result<(), BaselineError> {
        if z.len() != self.dim {
            return Err(BaselineError::DimensionMismatch {
                expected: self.dim,
                found: z.len(),
            });
        }
        Ok(())
    }

    fn scores_unchecked(&self, z: &[f64]) -> Vec<f64> {
        if self.normalized {
            let zn = norm(z);
            self.weights
                .chunks(self.dim)
                .map(|w| {
                    let denom = norm(w) * zn;
                    if denom > 0.0 {
                        dot(w, z) / denom
                    } else {
                        0.0
                    }
                })
                .collect()
        } else {
            self.weights
                .chunks(self.dim)
                .zip(&self.biases)
                .map(|(w, b)| dot(w, z) + b)
                .collect()
        }
    }

    /// `Wz + b`, or cosines when normalized.
    pub fn scores(&self, z: &[f64]) -> Result<Vec<f64>, BaselineError> {
        self.check_dim(z)?;
        Ok(self.scores_unchecked(z))
    }

    /// Highest score; ties go to the lowest class id.
    pub fn predict(&self, z: &[f64]) -> Result<usize, BaselineError> {
        self.check_dim(z)?;
        if self.class_count() == 0 {
            return Err(BaselineError::EmptyData);
        }
        Ok(argmax(&self.scores_unchecked(z)))
    }

    fn accumulate_gradient(&self, s: &Sample<'_>, gw: &mut [f64], gb: &mut [f64]) -> f64 {
        let d = self.dim;
        let scores = self.scores_unchecked(s.z);
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= sum);
        let loss = -(scores[s.label] - m) + sum.ln();
        let zn = norm(s.z);
        for i in 0..self.class_count() {
            let delta = p[i] - if i == s.label { 1.0 } else { 0.0 };
            let g = &mut gw[i * d..(i + 1) * d];
            if self.normalized {
                let w = self.weight(i);
                let wn = norm(w);
                if wn == 0.0 || zn == 0.0 {
                    continue;
                }
                // d cos(w, z) / dw = (z/|z| - cos * w/|w|) / |w|
                let cos = scores[i];
                for ((gk, &wk), &zk) in g.iter_mut().zip(w).zip(s.z) {
                    *gk += delta * (zk / zn - cos * wk / wn) / wn;
                }
            } else {
                for (gk, &zk) in g.iter_mut().zip(s.z) {
                    *gk += delta * zk;
                }
                gb[i] += delta;
            }
        }
        loss
    }

    /// Minimizes softmax cross entropy over all rows with SGD. Every row,
    /// old or new, is trainable. Cosine rows are renormalized after each
    /// epoch. Returns the mean loss per epoch.
    pub fn train(&mut self, data: &[Sample<'_>], cfg: &TrainConfig) -> Result<Vec<f64>, BaselineError> {
        cfg.validate().map_err(BaselineError::InvalidParameter)?;
        if data.is_empty() {
            return Err(BaselineError::EmptyData);
        }
        let c = self.class_count();
        for s in data {
            self.check_dim(s.z)?;
            if s.label >= c {
                return Err(BaselineError::LabelOutOfRange {
                    label: s.label,
                    classes: c,
                });
            }
        }
        let d = self.dim;
        let mut opt_w = Momentum::new(c * d, cfg.momentum);
        let mut opt_b = Momentum::new(c, cfg.momentum);
        let mut gw = vec![0.0; c * d];
        let mut gb = vec![0.0; c];
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr_at(epoch);
            let mut epoch_loss = 0.0;
            for idx in cfg.epoch_batches(data.len(), epoch) {
                gw.iter_mut().for_each(|v| *v = 0.0);
                gb.iter_mut().for_each(|v| *v = 0.0);
                for &i in &idx {
                    epoch_loss += self.accumulate_gradient(&data[i], &mut gw, &mut gb);
                }
                let n = idx.len() as f64;
                gw.iter_mut().for_each(|v| *v /= n);
                gb.iter_mut().for_each(|v| *v /= n);
                opt_w.step(&mut self.weights, &gw, lr);
                if !self.normalized {
                    opt_b.step(&mut self.biases, &gb, lr);
                }
            }
            if self.normalized {
                for row in self.weights.chunks_mut(d) {
                    let n = norm(row);
                    if n > 0.0 {
                        row.iter_mut().for_each(|v| *v /= n);
                    }
                }
            }
            if self.weights.iter().chain(&self.biases).any(|v| !v.is_finite()) {
                return Err(BaselineError::Diverged { epoch });
            }
            trace.push(epoch_loss / data.len() as f64);
        }
        Ok(trace)
    }
}

/// Nearest class mean classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NmeHead {
    dim: usize,
    class_means: Vec<f64>,
    counts: Vec<usize>,
}

impl NmeHead {
    /// Means over the samples available for each of `class_count` classes.
    ///
    /// A class absent from `data` keeps its mean from `previous` (features are
    /// frozen, so an earlier mean stays valid); a class absent from both is an
    /// error.
    pub fn fit(
        data: &[Sample<'_>],
        class_count: usize,
        dim: usize,
        previous: Option<&NmeHead>,
    ) -> Result<Self, BaselineError> {
        if let Some(prev) = previous {
            if prev.dim != dim {
                return Err(BaselineError::DimensionMismatch {
                    expected: dim,
                    found: prev.dim,
                });
            }
        }
        let mut sums = vec![0.0; class_count * dim];
        let mut counts = vec![0usize; class_count];
        for s in data {
            if s.z.len() != dim {
                return Err(BaselineError::DimensionMismatch {
                    expected: dim,
                    found: s.z.len(),
                });
            }
            if s.label >= class_count {
                return Err(BaselineError::LabelOutOfRange {
                    label: s.label,
                    classes: class_count,
                });
            }
            counts[s.label] += 1;
            sums[s.label * dim..(s.label + 1) * dim]
                .iter_mut()
                .zip(s.z)
                .for_each(|(a, z)| *a += z);
        }
        let mut class_means = Vec::with_capacity(class_count * dim);
        for c in 0..class_count {
            if counts[c] > 0 {
                class_means.extend(sums[c * dim..(c + 1) * dim].iter().map(|v| v / counts[c] as f64));
            } else if let Some(prev) = previous.filter(|p| c < p.class_count()) {
                class_means.extend_from_slice(prev.mean(c));
                counts[c] = prev.counts[c];
            } else {
                return Err(BaselineError::NoSamples(c));
            }
        }
        Ok(NmeHead {
            dim,
            class_means,
            counts,
        })
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.class_means[c * self.dim..(c + 1) * self.dim]
    }

    pub fn class_means(&self) -> &[f64] {
        &self.class_means
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Nearest class mean in Euclidean distance; ties to the lowest id.
    pub fn predict(&self, z: &[f64]) -> Result<usize, BaselineError> {
        if z.len() != self.dim {
            return Err(BaselineError::DimensionMismatch {
                expected: self.dim,
                found: z.len(),
            });
        }
        let d: Vec<f64> = self
            .class_means
            .chunks(self.dim)
            .map(|m| m.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        Ok(argmin(&d))
    }
}
