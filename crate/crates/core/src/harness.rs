//! Class-incremental protocol runner.
//!
//! [`run_cil`] replays a [`TaskStream`] through any [`IncrementalLearner`]:
//! at phase `t` the learner sees the training samples of the phase's classes
//! plus the exemplar memory, then is evaluated on the held-out samples of
//! every class seen so far. Learners see classes relabeled in stream order,
//! so phase `t` always introduces the next contiguous block of ids.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, info};

use crate::baselines::{LinearHead, NmeHead};
use crate::featureset::{FeatureSet, Sample, TaskStream};
use crate::ipc::{PrototypeClassifier, DEFAULT_GAMMA, DEFAULT_LAMBDA};
use crate::optim::TrainConfig;
use crate::{ErrorCategory, Result};

pub const DEFAULT_EVAL_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("task stream does not match the feature set: {0}")]
    InconsistentStream(String),
    #[error("class {class} has {count} samples; a train/eval split needs at least 2")]
    TooFewSamples { class: usize, count: usize },
    #[error("herding needs at least one sample")]
    EmptyClass,
    #[error("herding needs R >= 1")]
    ZeroMemory,
    #[error("unknown method {0:?} (expected ipc, linear, cosine, nme or joint)")]
    UnknownMethod(String),
}

impl HarnessError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            HarnessError::InvalidConfig(_) | HarnessError::UnknownMethod(_) | HarnessError::ZeroMemory => {
                ErrorCategory::Usage
            }
            _ => ErrorCategory::Data,
        }
    }
}

/// Greedy mean-matching exemplar selection.
///
/// Step `k` picks the unselected sample that brings the mean of the `k`
/// selected samples closest to the class mean; ties go to the lowest index.
/// Returns `min(r, rows.len())` positions into `rows`, in selection order.
pub fn herding_select(rows: &[&[f64]], r: usize) -> Result<Vec<usize>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyClass);
    }
    if r == 0 {
        return Err(HarnessError::ZeroMemory);
    }
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for row in rows {
        mean.iter_mut().zip(row.iter()).for_each(|(m, z)| *m += z);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut running = vec![0.0; d];
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(r.min(n));
    for k in 1..=r.min(n) {
        let inv_k = 1.0 / k as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in rows.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let cost: f64 = mean
                .iter()
                .zip(&running)
                .zip(row.iter())
                .map(|((m, s), z)| {
                    let diff = m - (s + z) * inv_k;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, c)| cost < c) {
                best = Some((i, cost));
            }
        }
        let (i, _) = best.expect("an unselected sample remains");
        taken[i] = true;
        running.iter_mut().zip(rows[i].iter()).for_each(|(s, z)| *s += z);
        picked.push(i);
    }
    Ok(picked)
}

/// Exemplars per class (feature-set sample indices in herding order).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    pub per_class: BTreeMap<usize, Vec<usize>>,
}

impl ExemplarMemory {
    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.values().flatten().copied()
    }
}

/// A classifier that can be driven through a task stream.
pub trait IncrementalLearner: Sync {
    /// Learns the classes `new_classes` from `data`, which may also contain
    /// replayed samples of earlier classes.
    fn learn_phase(&mut self, data: &[Sample<'_>], new_classes: Range<usize>) -> Result<()>;

    fn predict(&self, z: &[f64]) -> Result<usize>;
}

fn phase_config(cfg: &TrainConfig, phase: usize) -> TrainConfig {
    TrainConfig {
        seed: cfg.seed ^ (phase as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
        ..cfg.clone()
    }
}

/// Prototype classifier with frozen old prototypes.
#[derive(Debug, Clone)]
pub struct IpcLearner {
    pub classifier: PrototypeClassifier,
    pub train: TrainConfig,
    phase: usize,
}

impl IpcLearner {
    pub fn new(dim: usize, gamma: f64, lambda: f64, train: TrainConfig) -> Result<Self> {
        Ok(IpcLearner {
            classifier: PrototypeClassifier::new(dim, gamma, lambda)?,
            train,
            phase: 0,
        })
    }
}

impl IncrementalLearner for IpcLearner {
    fn learn_phase(&mut self, data: &[Sample<'_>], new_classes: Range<usize>) -> Result<()> {
        let classes: Vec<usize> = new_classes.collect();
        let cfg = phase_config(&self.train, self.phase);
        let trace = self.classifier.train_phase(data, &classes, &cfg)?;
        if let Some(last) = trace.last() {
            debug!(phase = self.phase, ce = last.ce, pl = last.pl, "ipc phase trained");
        }
        self.phase += 1;
        Ok(())
    }

    fn predict(&self, z: &[f64]) -> Result<usize> {
        Ok(self.classifier.predict(z)?)
    }
}

/// Linear or cosine softmax head; all rows stay trainable.
#[derive(Debug, Clone)]
pub struct LinearLearner {
    pub head: LinearHead,
    pub train: TrainConfig,
    phase: usize,
}

impl LinearLearner {
    pub fn new(dim: usize, normalized: bool, train: TrainConfig) -> Self {
        LinearLearner {
            head: LinearHead::new(dim, normalized),
            train,
            phase: 0,
        }
    }
}

impl IncrementalLearner for LinearLearner {
    fn learn_phase(&mut self, data: &[Sample<'_>], new_classes: Range<usize>) -> Result<()> {
        let cfg = phase_config(&self.train, self.phase);
        if new_classes.start != self.head.class_count() {
            return Err(crate::Error::Config(format!(
                "linear head has {} rows, phase starts at class {}",
                self.head.class_count(),
                new_classes.start
            )));
        }
        self.head.grow(new_classes.len(), cfg.seed);
        self.head.train(data, &cfg)?;
        self.phase += 1;
        Ok(())
    }

    fn predict(&self, z: &[f64]) -> Result<usize> {
        Ok(self.head.predict(z)?)
    }
}

/// Nearest class mean; old means are kept unless exemplars are replayed.
#[derive(Debug, Clone)]
pub struct NmeLearner {
    pub head: Option<NmeHead>,
    dim: usize,
}

impl NmeLearner {
    pub fn new(dim: usize) -> Self {
        NmeLearner { head: None, dim }
    }
}

impl IncrementalLearner for NmeLearner {
    fn learn_phase(&mut self, data: &[Sample<'_>], new_classes: Range<usize>) -> Result<()> {
        let head = NmeHead::fit(data, new_classes.end, self.dim, self.head.as_ref())?;
        self.head = Some(head);
        Ok(())
    }

    fn predict(&self, z: &[f64]) -> Result<usize> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| crate::Error::Config("NME head used before any phase".into()))?;
        Ok(head.predict(z)?)
    }
}

/// Upper-bound oracle: retrains a prototype classifier from scratch on all
/// training data seen so far, every phase.
#[derive(Debug, Clone)]
pub struct JointLearner {
    dim: usize,
    gamma: f64,
    lambda: f64,
    train: TrainConfig,
    seen: Vec<(Vec<f64>, usize)>,
    current: Option<PrototypeClassifier>,
}

impl JointLearner {
    pub fn new(dim: usize, gamma: f64, lambda: f64, train: TrainConfig) -> Self {
        JointLearner {
            dim,
            gamma,
            lambda,
            train,
            seen: Vec::new(),
            current: None,
        }
    }
}

impl IncrementalLearner for JointLearner {
    fn learn_phase(&mut self, data: &[Sample<'_>], new_classes: Range<usize>) -> Result<()> {
        // replayed exemplars of old classes are already in `seen`
        self.seen.extend(
            data.iter()
                .filter(|s| s.label >= new_classes.start)
                .map(|s| (s.z.to_vec(), s.label)),
        );
        let all: Vec<Sample<'_>> = self.seen.iter().map(|(z, l)| Sample { z, label: *l }).collect();
        let classes: Vec<usize> = (0..new_classes.end).collect();
        let mut clf = PrototypeClassifier::new(self.dim, self.gamma, self.lambda)?;
        clf.train_phase(&all, &classes, &self.train)?;
        self.current = Some(clf);
        Ok(())
    }

    fn predict(&self, z: &[f64]) -> Result<usize> {
        let clf = self
            .current
            .as_ref()
            .ok_or_else(|| crate::Error::Config("joint learner used before any phase".into()))?;
        Ok(clf.predict(z)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ipc,
    Linear,
    Cosine,
    Nme,
    Joint,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ipc => "ipc",
            Method::Linear => "linear",
            Method::Cosine => "cosine",
            Method::Nme => "nme",
            Method::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "ipc" => Ok(Method::Ipc),
            "linear" => Ok(Method::Linear),
            "cosine" => Ok(Method::Cosine),
            "nme" => Ok(Method::Nme),
            "joint" => Ok(Method::Joint),
            other => Err(HarnessError::UnknownMethod(other.to_string())),
        }
    }
}

/// Classifier choice plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub gamma: f64,
    pub lambda: f64,
    pub train: TrainConfig,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        MethodConfig {
            method,
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(HarnessError::InvalidConfig(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(HarnessError::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        self.train.validate().map_err(HarnessError::InvalidConfig)
    }

    pub fn build(&self, dim: usize) -> Result<Box<dyn IncrementalLearner>> {
        self.validate()?;
        Ok(match self.method {
            Method::Ipc => Box::new(IpcLearner::new(dim, self.gamma, self.lambda, self.train.clone())?),
            Method::Linear => Box::new(LinearLearner::new(dim, false, self.train.clone())),
            Method::Cosine => Box::new(LinearLearner::new(dim, true, self.train.clone())),
            Method::Nme => Box::new(NmeLearner::new(dim)),
            Method::Joint => Box::new(JointLearner::new(dim, self.gamma, self.lambda, self.train.clone())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Held-out share of every class.
    pub eval_fraction: f64,
    /// Seeds the train/eval split.
    pub seed: u64,
    /// Overrides the stream's `memory_per_class` when set.
    pub memory_per_class: Option<usize>,
    /// Scale every feature vector to unit norm first.
    pub l2_normalize: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            eval_fraction: DEFAULT_EVAL_FRACTION,
            seed: 0,
            memory_per_class: None,
            l2_normalize: false,
        }
    }
}

/// Stratified split: per class, sample indices for training and evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSplit {
    pub train: Vec<Vec<usize>>,
    pub eval: Vec<Vec<usize>>,
}

/// Holds out `round(fraction * n_c)` samples of every class (at least one,
/// leaving at least one for training), chosen by a seeded shuffle.
pub fn stratified_split(fs: &FeatureSet, fraction: f64, seed: u64) -> Result<EvalSplit, HarnessError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(HarnessError::InvalidConfig(format!(
            "eval fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(fs.class_count());
    let mut eval = Vec::with_capacity(fs.class_count());
    for (class, mut members) in fs.class_indices().into_iter().enumerate() {
        let n = members.len();
        if n < 2 {
            return Err(HarnessError::TooFewSamples { class, count: n });
        }
        members.shuffle(&mut rng);
        let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut held: Vec<usize> = members[..k].to_vec();
        let mut kept: Vec<usize> = members[k..].to_vec();
        held.sort_unstable();
        kept.sort_unstable();
        eval.push(held);
        train.push(kept);
    }
    Ok(EvalSplit { train, eval })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub t: usize,
    /// Feature-set class ids introduced in this phase.
    pub classes: Vec<usize>,
    /// Accuracy over the pooled eval samples of every class seen so far.
    #[serde(rename = "A_t")]
    pub accuracy: f64,
    /// Accuracy on classes from earlier phases (`None` in the base phase).
    pub old_acc: Option<f64>,
    pub new_acc: f64,
    pub per_class_accuracy: Vec<ClassAccuracy>,
    pub train_samples: usize,
    pub replayed_samples: usize,
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub version: String,
    pub config_echo: BTreeMap<String, Value>,
    pub seed: u64,
    pub phases: Vec<PhaseReport>,
    pub average_accuracy: f64,
}

impl RunReport {
    pub fn per_phase_accuracy(&self) -> Vec<f64> {
        self.phases.iter().map(|p| p.accuracy).collect()
    }

    pub fn per_phase_old_new(&self) -> Vec<(Option<f64>, f64)> {
        self.phases.iter().map(|p| (p.old_acc, p.new_acc)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Mean of the per-phase accuracies, base phase included.
pub fn average_accuracy(per_phase: &[f64]) -> f64 {
    if per_phase.is_empty() {
        return 0.0;
    }
    per_phase.iter().sum::<f64>() / per_phase.len() as f64
}

/// Replays `stream` through `learner`.
///
/// Every check on the configuration happens before the first phase trains.
pub fn run_cil(
    fs: &FeatureSet,
    stream: &TaskStream,
    learner: &mut dyn IncrementalLearner,
    method_name: &str,
    opts: &RunOptions,
) -> Result<RunReport> {
    stream.validate(fs).map_err(HarnessError::InconsistentStream)?;
    let split = stratified_split(fs, opts.eval_fraction, opts.seed)?;
    let memory_per_class = opts.memory_per_class.unwrap_or(stream.memory_per_class);
    let view = if opts.l2_normalize {
        fs.l2_normalized()
    } else {
        fs.clone()
    };

    let order = stream.class_order();
    let mut local = vec![usize::MAX; fs.class_count()];
    for (pos, &c) in order.iter().enumerate() {
        local[c] = pos;
    }
    let sample_of = |i: usize| Sample {
        z: view.row(i),
        label: local[view.labels()[i]],
    };

    let mut memory = ExemplarMemory::default();
    let mut phases = Vec::with_capacity(stream.phases.len());
    let mut seen = 0usize;
    for (t, phase) in stream.phases.iter().enumerate() {
        let new_range = seen..seen + phase.classes.len();
        let mut data: Vec<Sample<'_>> = Vec::new();
        for &c in &phase.classes {
            data.extend(split.train[c].iter().map(|&i| sample_of(i)));
        }
        let train_samples = data.len();
        data.extend(memory.indices().map(sample_of));
        let replayed = data.len() - train_samples;

        learner.learn_phase(&data, new_range.clone())?;
        seen = new_range.end;

        let eval_idx: Vec<usize> = order[..seen]
            .iter()
            .flat_map(|&c| split.eval[c].iter().copied())
            .collect();
        let predictions: Vec<usize> = eval_idx
            .par_iter()
            .map(|&i| learner.predict(view.row(i)))
            .collect::<Result<_>>()?;

        let mut correct = vec![0usize; seen];
        let mut total = vec![0usize; seen];
        for (&i, &pred) in eval_idx.iter().zip(&predictions) {
            let y = local[view.labels()[i]];
            total[y] += 1;
            if pred == y {
                correct[y] += 1;
            }
        }
        let ratio = |r: Range<usize>| -> Option<f64> {
            let n: usize = total[r.clone()].iter().sum();
            (n > 0).then(|| correct[r].iter().sum::<usize>() as f64 / n as f64)
        };
        let accuracy = ratio(0..seen).unwrap_or(0.0);
        let old_acc = if new_range.start > 0 {
            ratio(0..new_range.start)
        } else {
            None
        };
        let new_acc = ratio(new_range.clone()).unwrap_or(0.0);
        let per_class_accuracy = (0..seen)
            .map(|y| ClassAccuracy {
                class: order[y],
                accuracy: correct[y] as f64 / total[y] as f64,
            })
            .collect();
        info!(t, accuracy, ?old_acc, new_acc, "phase evaluated");
        phases.push(PhaseReport {
            t,
            classes: phase.classes.clone(),
            accuracy,
            old_acc,
            new_acc,
            per_class_accuracy,
            train_samples,
            replayed_samples: replayed,
            eval_samples: eval_idx.len(),
        });

        if memory_per_class > 0 {
            for &c in &phase.classes {
                let members = &split.train[c];
                let rows: Vec<&[f64]> = members.iter().map(|&i| view.row(i)).collect();
                let chosen = herding_select(&rows, memory_per_class)?;
                memory
                    .per_class
                    .insert(c, chosen.into_iter().map(|j| members[j]).collect());
            }
        }
    }

    let per_phase: Vec<f64> = phases.iter().map(|p| p.accuracy).collect();
    let mut config_echo = BTreeMap::new();
    config_echo.insert("method".into(), json!(method_name));
    config_echo.insert("eval_fraction".into(), json!(opts.eval_fraction));
    config_echo.insert("split_seed".into(), json!(opts.seed));
    config_echo.insert("memory_per_class".into(), json!(memory_per_class));
    config_echo.insert("l2_normalize".into(), json!(opts.l2_normalize));
    config_echo.insert("phases".into(), json!(stream.incremental_phases()));
    config_echo.insert("base_fraction".into(), json!(stream.base_fraction));
    config_echo.insert("class_count".into(), json!(fs.class_count()));
    config_echo.insert("dim".into(), json!(fs.dim()));
    Ok(RunReport {
        method: method_name.to_string(),
        version: crate::VERSION.to_string(),
        config_echo,
        seed: opts.seed,
        average_accuracy: average_accuracy(&per_phase),
        phases,
    })
}

/// Builds the learner for `method` and runs it, echoing the method's
/// hyperparameters into the report.
pub fn run_method(fs: &FeatureSet, stream: &TaskStream, method: &MethodConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut learner = method.build(fs.dim())?;
    let mut report = run_cil(fs, stream, learner.as_mut(), method.method.as_str(), opts)?;
    let echo = &mut report.config_echo;
    if matches!(method.method, Method::Ipc | Method::Joint) {
        echo.insert("gamma".into(), json!(method.gamma));
        echo.insert("lambda".into(), json!(method.lambda));
    }
    if method.method != Method::Nme {
        let t = &method.train;
        echo.insert("epochs".into(), json!(t.epochs));
        echo.insert("batch_size".into(), json!(t.batch_size));
        echo.insert("learning_rate".into(), json!(t.learning_rate));
        echo.insert("momentum".into(), json!(t.momentum));
        echo.insert("lr_schedule".into(), json!(t.lr_schedule));
        echo.insert("train_seed".into(), json!(t.seed));
        echo.insert("objective".into(), json!(t.objective));
    }
    Ok(report)
}

/// One CSV row per report: method, protocol, per-phase accuracies and the
/// average, all accuracies in percent.
pub fn reports_to_table(reports: &[(String, RunReport)]) -> String {
    let max_phases = reports.iter().map(|(_, r)| r.phases.len()).max().unwrap_or(0);
    let mut out = String::from("source,method,phases,replay,gamma,lambda,seed");
    for t in 0..max_phases {
        out.push_str(&format!(",A_{t}"));
    }
    out.push_str(",average_accuracy\n");
    let field = |r: &RunReport, key: &str| r.config_echo.get(key).map(|v| v.to_string()).unwrap_or_default();
    for (source, r) in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            source.replace(',', "_"),
            r.method,
            field(r, "phases"),
            field(r, "memory_per_class"),
            field(r, "gamma"),
            field(r, "lambda"),
            r.seed
        ));
        for t in 0..max_phases {
            match r.phases.get(t) {
                Some(p) => out.push_str(&format!(",{:.2}", 100.0 * p.accuracy)),
                None => out.push(','),
            }
        }
        out.push_str(&format!(",{:.2}\n", 100.0 * r.average_accuracy));
    }
    out
}
