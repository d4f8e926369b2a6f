mod common;

use std::collections::HashMap;
use std::ops::Range;

use common::*;
use protocil::featureset::{generate_synthetic, split_tasks, SynthSpec};
use protocil::harness::{
    average_accuracy, run_cil, run_method, stratified_split, IncrementalLearner, Method, MethodConfig, RunOptions,
};
use protocil::{FeatureSet, RunReport, Sample};

/// Looks every feature vector up in the full data set.
struct Lookup {
    local: HashMap<Vec<u64>, usize>,
}

impl Lookup {
    fn new(fs: &FeatureSet, order: &[usize]) -> Self {
        let pos: HashMap<usize, usize> = order.iter().enumerate().map(|(p, &c)| (c, p)).collect();
        let local = (0..fs.n_samples())
            .map(|i| (fs.row(i).iter().map(|v| v.to_bits()).collect(), pos[&fs.labels()[i]]))
            .collect();
        Lookup { local }
    }
}

impl IncrementalLearner for Lookup {
    fn learn_phase(&mut self, _: &[Sample<'_>], _: Range<usize>) -> protocil::Result<()> {
        Ok(())
    }

    fn predict(&self, z: &[f64]) -> protocil::Result<usize> {
        Ok(self.local[&z.iter().map(|v| v.to_bits()).collect::<Vec<_>>()])
    }
}

fn small() -> FeatureSet {
    let spec = SynthSpec {
        class_count: 8,
        dim: 6,
        samples_per_class: 25,
        mean_scale: 3.0,
        within_std: 1.0,
        seed: 88,
    };
    generate_synthetic(&spec).unwrap()
}

#[test]
fn a_perfect_learner_scores_one() {
    let fs = small();
    let stream = split_tasks(&fs, 2, 0.5, 0, Some(4)).unwrap();
    let mut learner = Lookup::new(&fs, &stream.class_order());
    let report = run_cil(&fs, &stream, &mut learner, "lookup", &RunOptions::default()).unwrap();
    assert_eq!(report.average_accuracy, 1.0);
    assert!(report.phases.iter().all(|p| p.accuracy == 1.0 && p.new_acc == 1.0));
    assert_eq!(report.phases[0].old_acc, None);
    assert_eq!(report.phases[1].old_acc, Some(1.0));
}

#[test]
fn average_is_the_mean_of_phases() {
    let fs = small();
    let stream = split_tasks(&fs, 4, 0.5, 0, None).unwrap();
    let mut cfg = MethodConfig::new(Method::Linear);
    cfg.train.epochs = 10;
    let report = run_method(&fs, &stream, &cfg, &RunOptions::default()).unwrap();
    let per = report.per_phase_accuracy();
    assert_eq!(per.len(), 5);
    let mean = per.iter().sum::<f64>() / 5.0;
    assert!((report.average_accuracy - mean).abs() < 1e-15);
    assert_eq!(report.average_accuracy, average_accuracy(&per));
    assert_eq!(RunReport::from_json(&report.to_json()).unwrap(), report);
}

#[test]
fn replay_keeps_min_r_n_exemplars_per_old_class() {
    let fs = small();
    let split = stratified_split(&fs, 0.2, 0).unwrap();
    for r in [1, 3, 50] {
        let stream = split_tasks(&fs, 2, 0.5, r, None).unwrap();
        let mut cfg = MethodConfig::new(Method::Nme);
        cfg.train.epochs = 1;
        let report = run_method(&fs, &stream, &cfg, &RunOptions::default()).unwrap();
        let mut old: Vec<usize> = Vec::new();
        for (t, phase) in stream.phases.iter().enumerate() {
            let want: usize = old.iter().map(|&c| r.min(split.train[c].len())).sum();
            assert_eq!(report.phases[t].replayed_samples, want, "R={r}, phase {t}");
            let fresh: usize = phase.classes.iter().map(|&c| split.train[c].len()).sum();
            assert_eq!(report.phases[t].train_samples, fresh);
            old.extend(&phase.classes);
        }
    }
}

#[test]
fn eval_and_train_split_partition_each_class() {
    let fs = small();
    let split = stratified_split(&fs, 0.2, 9).unwrap();
    for (c, members) in fs.class_indices().iter().enumerate() {
        let mut both: Vec<usize> = split.train[c].iter().chain(&split.eval[c]).copied().collect();
        both.sort_unstable();
        assert_eq!(&both, members);
        assert_eq!(split.eval[c].len(), 5);
    }
    assert!(stratified_split(&fs, 0.0, 0).is_err());
    let lonely = FeatureSet::new(vec![0.0, 1.0, 2.0], vec![0, 0, 1], 1).unwrap();
    assert!(stratified_split(&lonely, 0.5, 0).is_err());
}

#[test]
fn ipc_tracks_the_centroid_oracle_without_replay() {
    let (fs, stream) = fixture();
    let opts = fixture_options();
    let split = stratified_split(&fs, opts.eval_fraction, opts.seed).unwrap();
    let mut cfg = MethodConfig::new(Method::Ipc);
    cfg.train.seed = FIXTURE_RUN_SEED;
    let report = run_method(&fs, &stream, &cfg, &opts).unwrap();
    let mut seen: Vec<usize> = Vec::new();
    for (t, phase) in stream.phases.iter().enumerate() {
        seen.extend(&phase.classes);
        let train: Vec<usize> = seen.iter().flat_map(|&c| split.train[c].clone()).collect();
        let eval: Vec<usize> = seen.iter().flat_map(|&c| split.eval[c].clone()).collect();
        let oracle = centroid_accuracy(&fs, &train, &eval);
        assert!((report.phases[t].accuracy - oracle).abs() <= 0.02, "phase {t}");
    }
}

#[test]
fn configuration_errors_surface_before_training() {
    let fs = small();
    let stream = split_tasks(&fs, 2, 0.5, 0, None).unwrap();
    let mut cfg = MethodConfig::new(Method::Ipc);
    cfg.lambda = -1.0;
    assert!(run_method(&fs, &stream, &cfg, &RunOptions::default()).is_err());
    let mut broken = stream.clone();
    broken.phases[1].classes.push(0);
    assert!(run_method(&fs, &broken, &MethodConfig::new(Method::Nme), &RunOptions::default()).is_err());
}
