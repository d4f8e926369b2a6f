//! Feature-space diagnostics: symmetric eigendecomposition, covariance
//! spectrum with PC-ID, and class-blocked cosine similarity matrices.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featureset::FeatureSet;
use crate::ErrorCategory;

pub const SYMMETRY_TOL: f64 = 1e-8;
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Fraction of total variance a PC-ID must explain.
pub const PCID_THRESHOLD: f64 = 0.9;
const NEGATIVE_CLAMP: f64 = 1e-10;
// absorbs rounding in prefix sums such as 9 * x / (10 * x)
const CUMULATIVE_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("matrix must be square and non-empty, got {len} entries for order {n}")]
    Shape { n: usize, len: usize },
    #[error("matrix is not symmetric: |m[{row}][{col}] - m[{col}][{row}]| = {diff:e}")]
    Asymmetric { row: usize, col: usize, diff: f64 },
    #[error("non-finite matrix entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("Jacobi iteration did not converge in {sweeps} sweeps (off-diagonal norm {off:e})")]
    NotConverged { sweeps: usize, off: f64 },
    #[error("covariance has eigenvalue {value:e}, below the clamp tolerance")]
    NegativeEigenvalue { value: f64 },
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("sample {0} has zero norm")]
    ZeroNorm(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl DiagnosticsError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            DiagnosticsError::NotConverged { .. } | DiagnosticsError::NegativeEigenvalue { .. } => {
                ErrorCategory::Numeric
            }
            _ => ErrorCategory::Data,
        }
    }
}

/// Eigenvalues in descending order; column `j` of `vectors` (row-major,
/// `n x n`) is the unit eigenvector for `values[j]`.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    pub sweeps: usize,
}

impl Eigen {
    pub fn order(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, j: usize) -> Vec<f64> {
        let n = self.order();
        (0..n).map(|i| self.vectors[i * n + j]).collect()
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major, `n x n`).
///
/// Sweeps continue until the off-diagonal Frobenius norm drops to
/// `JACOBI_TOL` times the Frobenius norm of the input.
pub fn symmetric_eig(m: &[f64], n: usize) -> Result<Eigen, DiagnosticsError> {
    if n == 0 || m.len() != n * n {
        return Err(DiagnosticsError::Shape { n, len: m.len() });
    }
    if let Some(k) = m.iter().position(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite { row: k / n, col: k % n });
    }
    let scale = m.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            let diff = (m[i * n + j] - m[j * n + i]).abs();
            if diff > SYMMETRY_TOL * scale {
                return Err(DiagnosticsError::Asymmetric { row: i, col: j, diff });
            }
        }
    }

    // symmetrize so rounding asymmetry cannot leak into the rotations
    let mut a: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            0.5 * (m[i * n + j] + m[j * n + i])
        })
        .collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off <= JACOBI_TOL * frob {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(DiagnosticsError::NotConverged { sweeps, off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + src];
        }
    }
    Ok(Eigen {
        values,
        vectors,
        sweeps,
    })
}

/// Covariance spectrum of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending, clamped at zero. Length equals the feature dimension.
    pub eigenvalues: Vec<f64>,
    /// `eigenvalues[i] / sum(eigenvalues)`.
    pub normalized: Vec<f64>,
    /// `cumulative[k - 1] = P(k)`, the share of variance in the top `k`
    /// components.
    pub cumulative: Vec<f64>,
    /// Smallest `k` with `P(k) >= 0.9`; 0 for zero covariance.
    pub pc_id: usize,
    pub dim: usize,
    pub n_samples: usize,
    pub normalized_features: bool,
    /// Trace of the covariance computed directly from the data.
    pub trace: f64,
    /// Set when every sample is identical (zero covariance).
    pub degenerate: bool,
}

impl SpectrumReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,eigenvalue,normalized,cumulative")?;
        for k in 0..self.eigenvalues.len() {
            writeln!(
                w,
                "{},{},{},{}",
                k + 1,
                self.eigenvalues[k],
                self.normalized[k],
                self.cumulative[k]
            )?;
        }
        Ok(())
    }
}

/// Eigenvalues of a covariance that is `scale * X^T X` or, when `X` is
/// wide, of `scale * X X^T` (same nonzero spectrum), padded with zeros to
/// `dim`.
fn gram_spectrum(centered: &[f64], n: usize, dim: usize, scale: f64) -> Result<Vec<f64>, DiagnosticsError> {
    let row = |i: usize| &centered[i * dim..(i + 1) * dim];
    let (order, m) = if n < dim {
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = scale * row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum::<f64>();
                g[i * n + j] = v;
                g[j * n + i] = v;
            }
        }
        (n, g)
    } else {
        let mut c = vec![0.0; dim * dim];
        for i in 0..n {
            let r = row(i);
            for a in 0..dim {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..dim {
                    c[a * dim + b] += ra * r[b];
                }
            }
        }
        for a in 0..dim {
            for b in a..dim {
                let v = scale * c[a * dim + b];
                c[a * dim + b] = v;
                c[b * dim + a] = v;
            }
        }
        (dim, c)
    };
    let mut values = symmetric_eig(&m, order)?.values;
    values.resize(dim, 0.0);
    Ok(values)
}

/// Pooled covariance spectrum (divisor `n - 1`) and PC-ID. With
/// `normalize_features` every sample is scaled to unit L2 norm before
/// centering.
pub fn covariance_spectrum(fs: &FeatureSet, normalize_features: bool) -> Result<SpectrumReport, DiagnosticsError> {
    let n = fs.n_samples();
    if n < 2 {
        return Err(DiagnosticsError::TooFewSamples { needed: 2, found: n });
    }
    let dim = fs.dim();
    let source = if normalize_features {
        fs.l2_normalized()
    } else {
        fs.clone()
    };
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        mean.iter_mut().zip(source.row(i)).for_each(|(m, z)| *m += z);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = Vec::with_capacity(n * dim);
    for i in 0..n {
        centered.extend(source.row(i).iter().zip(&mean).map(|(z, m)| z - m));
    }
    let scale = 1.0 / (n - 1) as f64;
    let trace = scale * centered.iter().map(|v| v * v).sum::<f64>();

    let mut eigenvalues = if trace == 0.0 {
        vec![0.0; dim]
    } else {
        gram_spectrum(&centered, n, dim, scale)?
    };
    let top = eigenvalues.first().copied().unwrap_or(0.0).max(1.0);
    for v in eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -NEGATIVE_CLAMP * top {
                return Err(DiagnosticsError::NegativeEigenvalue { value: *v });
            }
            *v = 0.0;
        }
    }
    Ok(spectrum_from_eigenvalues(eigenvalues, n, normalize_features, trace))
}

fn spectrum_from_eigenvalues(
    eigenvalues: Vec<f64>,
    n_samples: usize,
    normalized_features: bool,
    trace: f64,
) -> SpectrumReport {
    let dim = eigenvalues.len();
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return SpectrumReport {
            normalized: vec![0.0; dim],
            cumulative: vec![0.0; dim],
            eigenvalues,
            pc_id: 0,
            dim,
            n_samples,
            normalized_features,
            trace,
            degenerate: true,
        };
    }
    let normalized: Vec<f64> = eigenvalues.iter().map(|v| v / total).collect();
    let mut cumulative = Vec::with_capacity(dim);
    let mut prefix = 0.0;
    for v in &eigenvalues {
        prefix += v;
        cumulative.push(prefix / total);
    }
    let pc_id = cumulative
        .iter()
        .position(|&p| p >= PCID_THRESHOLD - CUMULATIVE_SLACK)
        .map_or(dim, |k| k + 1);
    SpectrumReport {
        eigenvalues,
        normalized,
        cumulative,
        pc_id,
        dim,
        n_samples,
        normalized_features,
        trace,
        degenerate: false,
    }
}

/// Contiguous block of one class in a [`SimilarityReport`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBlock {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

/// Pairwise cosine similarities with rows and columns grouped by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Feature-set indices of the rows, grouped by class.
    pub sample_indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Row-major `m x m` with `m = sample_indices.len()`.
    pub matrix: Vec<f64>,
    pub class_boundaries: Vec<ClassBlock>,
    /// Mean over off-diagonal same-class pairs; `None` when no class has two
    /// samples.
    pub within_mean: Option<f64>,
    /// Mean over different-class pairs; `None` with a single class.
    pub between_mean: Option<f64>,
}

impl SimilarityReport {
    pub fn size(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.size() + j]
    }

    /// First row holds the class of each column; every following row starts
    /// with its own class.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let m = self.size();
        write!(w, "class")?;
        for l in &self.labels {
            write!(w, ",{l}")?;
        }
        writeln!(w)?;
        for i in 0..m {
            write!(w, "{}", self.labels[i])?;
            for j in 0..m {
                write!(w, ",{}", self.matrix[i * m + j])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Cosine similarity matrix over at most `max_per_class` samples per class
/// (seeded subsample), sorted by class.
pub fn cosine_matrix(fs: &FeatureSet, max_per_class: usize, seed: u64) -> Result<SimilarityReport, DiagnosticsError> {
    if fs.n_samples() < 2 {
        return Err(DiagnosticsError::TooFewSamples {
            needed: 2,
            found: fs.n_samples(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample_indices = Vec::new();
    let mut labels = Vec::new();
    let mut class_boundaries = Vec::new();
    for (class, mut members) in fs.class_indices().into_iter().enumerate() {
        if members.len() > max_per_class {
            members.shuffle(&mut rng);
            members.truncate(max_per_class);
            members.sort_unstable();
        }
        if members.is_empty() {
            continue;
        }
        let start = sample_indices.len();
        labels.extend(std::iter::repeat_n(class, members.len()));
        sample_indices.extend(members);
        class_boundaries.push(ClassBlock {
            class,
            start,
            end: sample_indices.len(),
        });
    }
    let m = sample_indices.len();
    if m < 2 {
        return Err(DiagnosticsError::TooFewSamples { needed: 2, found: m });
    }
    let dim = fs.dim();
    let mut unit = Vec::with_capacity(m * dim);
    for &i in &sample_indices {
        let row = fs.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(DiagnosticsError::ZeroNorm(i));
        }
        unit.extend(row.iter().map(|v| v / norm));
    }
    let unit_row = |i: usize| &unit[i * dim..(i + 1) * dim];
    let matrix: Vec<f64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|i| {
            let ri = unit_row(i);
            (0..m).map(move |j| {
                if i == j {
                    1.0
                } else {
                    ri.iter()
                        .zip(unit_row(j))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        .clamp(-1.0, 1.0)
                }
            })
        })
        .collect();
    // cos(i, j) and cos(j, i) sum in the same order but from swapped operands
    let mut matrix = matrix;
    for i in 0..m {
        for j in i + 1..m {
            matrix[j * m + i] = matrix[i * m + j];
        }
    }

    let (mut within, mut n_within, mut between, mut n_between) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                within += matrix[i * m + j];
                n_within += 1;
            } else {
                between += matrix[i * m + j];
                n_between += 1;
            }
        }
    }
    Ok(SimilarityReport {
        sample_indices,
        labels,
        matrix,
        class_boundaries,
        within_mean: (n_within > 0).then(|| within / n_within as f64),
        between_mean: (n_between > 0).then(|| between / n_between as f64),
    })
}
