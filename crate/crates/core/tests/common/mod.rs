//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls into the code paths it is used to check.

#![allow(dead_code)]

use protocil::featureset::{generate_synthetic, split_tasks, FeatureSet, SynthSpec, TaskStream};
use protocil::harness::RunOptions;
use protocil::{PrototypeClassifier, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Borrowed samples over owned rows.
pub fn samples<'a>(rows: &'a [Vec<f64>], labels: &[usize]) -> Vec<Sample<'a>> {
    rows.iter().zip(labels).map(|(z, &label)| Sample { z, label }).collect()
}

/// Central finite differences of the mean hybrid loss with respect to
/// every prototype entry.
pub fn finite_difference_gradient(clf: &PrototypeClassifier, batch: &[Sample<'_>], h: f64) -> Vec<f64> {
    let base = clf.prototypes().to_vec();
    let mut out = vec![0.0; base.len()];
    for k in 0..base.len() {
        let eval = |delta: f64| {
            let mut p = base.clone();
            p[k] += delta;
            let shifted = PrototypeClassifier::from_prototypes(p, clf.dim(), 0, clf.gamma(), clf.lambda()).unwrap();
            shifted.hybrid_loss(batch).unwrap().total
        };
        out[k] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    out
}

/// Mean hybrid loss evaluated straight from the formula, no shifting.
pub fn naive_hybrid_loss(protos: &[Vec<f64>], gamma: f64, lambda: f64, batch: &[(Vec<f64>, usize)]) -> (f64, f64) {
    let mut ce = 0.0;
    let mut pl = 0.0;
    for (z, y) in batch {
        let d: Vec<f64> = protos
            .iter()
            .map(|p| p.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let denom: f64 = d.iter().map(|di| (-gamma * di).exp()).sum();
        ce += -((-gamma * d[*y]).exp() / denom).ln();
        pl += d[*y];
    }
    let n = batch.len() as f64;
    (ce / n, ce / n + lambda * pl / n)
}

/// Index of the smallest value, lowest index on ties, by exhaustive scan.
pub fn brute_argmin(values: &[f64]) -> usize {
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    values.iter().position(|&v| v == best).unwrap()
}

pub fn brute_argmax(values: &[f64]) -> usize {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|&v| v == best).unwrap()
}

/// Greedy herding recomputing the candidate exemplar mean from scratch at
/// every step.
pub fn brute_force_herding(rows: &[Vec<f64>], r: usize) -> Vec<usize> {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|k| rows.iter().map(|x| x[k]).sum::<f64>() / n as f64)
        .collect();
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < r.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let members: Vec<usize> = chosen.iter().copied().chain([i]).collect();
            let cost: f64 = (0..d)
                .map(|k| {
                    let m = members.iter().map(|&j| rows[j][k]).sum::<f64>() / members.len() as f64;
                    (mean[k] - m).powi(2)
                })
                .sum();
            match best {
                Some((_, c)) if c <= cost => {}
                _ => best = Some((i, cost)),
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// Symmetric matrix with entries `v / 64`, `v` in `[-1000, 1000]`, drawn from
/// a 64-bit LCG over the upper triangle in row order. Every entry is exact
/// in binary so the matrix can be rebuilt bit-for-bit elsewhere.
pub fn lcg_symmetric(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = ((s >> 33) % 2001) as i64 - 1000;
            let x = v as f64 / 64.0;
            a[i * n + j] = x;
            a[j * n + i] = x;
        }
    }
    a
}

/// Eigenvalues of `lcg_symmetric(20241019, 30)`, descending, computed once
/// with mpmath at 60 significant digits.
pub const LCG_REFERENCE_SEED: u64 = 20241019;
#[allow(clippy::excessive_precision)]
pub const LCG_REFERENCE_SPECTRUM: [f64; 30] = [
    94.67475226497467930740797,
    83.20785010598720813961303,
    73.53371183337315703199371,
    59.28456002806005896583841,
    52.10527533008136819579501,
    45.09000183977514107491999,
    41.45377462436833274323699,
    37.92495349678865015319626,
    33.22224542434212163495734,
    29.20470557786926974384596,
    21.10472657471895474629146,
    14.24996213065876630252207,
    10.47457747379516503137348,
    9.249910828384530822317403,
    6.252588886814695357920075,
    1.872070121889999049513085,
    -3.401474439294486267458108,
    -8.076178559193641103669581,
    -17.77648628088943256525816,
    -21.33843031764558335241499,
    -25.23150781183843860164174,
    -30.10335921192865046325322,
    -39.50822161146796700378463,
    -46.94530426191907955994214,
    -51.98110052136951811950072,
    -60.70365334416012861683227,
    -62.11288339737561578879571,
    -72.27317615585988834473047,
    -81.96479989576274790595695,
    -94.34846573317692060750358,
];

/// The desk-scale CIL fixture: 20 classes, dim 64, 100 per class, base half,
/// five incremental phases, no replay.
pub const FIXTURE_SEED: u64 = 2024;
pub const FIXTURE_RUN_SEED: u64 = 7;

pub fn fixture_spec() -> SynthSpec {
    SynthSpec {
        class_count: 20,
        dim: 64,
        samples_per_class: 100,
        mean_scale: 10.0,
        within_std: 1.0,
        seed: FIXTURE_SEED,
    }
}

pub fn fixture() -> (FeatureSet, TaskStream) {
    let fs = generate_synthetic(&fixture_spec()).unwrap();
    let stream = split_tasks(&fs, 5, 0.5, 0, None).unwrap();
    (fs, stream)
}

pub fn fixture_options() -> RunOptions {
    RunOptions {
        seed: FIXTURE_RUN_SEED,
        ..RunOptions::default()
    }
}

/// Independent nearest-centroid accuracy: class means over `train`, scored
/// on `eval`.
pub fn centroid_accuracy(fs: &FeatureSet, train: &[usize], eval: &[usize]) -> f64 {
    let d = fs.dim();
    let c = fs.class_count();
    let mut sums = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for &i in train {
        let l = fs.labels()[i];
        counts[l] += 1;
        sums[l].iter_mut().zip(fs.row(i)).for_each(|(s, v)| *s += v);
    }
    let correct = eval
        .iter()
        .filter(|&&i| {
            let dist: Vec<f64> = (0..c)
                .map(|l| {
                    if counts[l] == 0 {
                        return f64::INFINITY;
                    }
                    (0..d)
                        .map(|k| (fs.row(i)[k] - sums[l][k] / counts[l] as f64).powi(2))
                        .sum()
                })
                .collect();
            brute_argmin(&dist) == fs.labels()[i]
        })
        .count();
    correct as f64 / eval.len() as f64
}
