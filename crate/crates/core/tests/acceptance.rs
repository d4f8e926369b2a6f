//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Runs as a plain binary so the report is printed even when the output of
//! ordinary tests is captured. Exits non-zero if any criterion fails.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use common::*;
use protocil::diagnostics::{covariance_spectrum, symmetric_eig};
use protocil::featureset::{generate_synthetic, split_tasks, FeatureSet, SynthSpec};
use protocil::harness::{herding_select, run_method, stratified_split, Method, MethodConfig};
use protocil::{NmeHead, Objective, PrototypeClassifier, Sample, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;

/// Average accuracies of the fixture stream, frozen from a reference run.
const FIXTURE_ACC_IPC: f64 = 1.0;
#[allow(clippy::excessive_precision)]
const FIXTURE_ACC_LINEAR: f64 = 0.70203538359788353;
#[allow(clippy::excessive_precision)]
const FIXTURE_ACC_COSINE: f64 = 0.40727017195767190;
const FIXTURE_ACC_NME: f64 = 1.0;
const FIXTURE_ACC_JOINT: f64 = 1.0;
const LAMBDAS: [f64; 5] = [0.0, 0.1, 0.3, 1.0, 10.0];
const FIXTURE_ACC_LAMBDA: [f64; 5] = [1.0; 5];

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn frozen(name: &str, got: f64, want: f64) -> Result<(), String> {
    ensure((got - want).abs() <= 1e-12, || {
        format!("{name}: {got} differs from frozen {want}")
    })
}

fn gradient_matches_finite_differences() -> Result<String, String> {
    let mut rng = rng(101);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let c = rng.random_range(2..=10);
        let d = rng.random_range(2..=32);
        let b = rng.random_range(1..=64);
        let gamma = rng.random_range(0.1..10.0);
        let lambda = [0.0, 0.3, 2.0][case % 3];
        let frozen_count = rng.random_range(0..=c);
        let protos = uniform_vec(&mut rng, c * d, -1.0, 1.0);
        let rows: Vec<Vec<f64>> = (0..b).map(|_| uniform_vec(&mut rng, d, -1.0, 1.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let batch = samples(&rows, &labels);
        let clf = PrototypeClassifier::from_prototypes(protos, d, frozen_count, gamma, lambda).unwrap();
        let analytic = clf.loss_gradient(&batch).unwrap();
        let open = PrototypeClassifier::from_prototypes(clf.prototypes().to_vec(), d, 0, gamma, lambda).unwrap();
        let full = open.loss_gradient(&batch).unwrap();
        let numeric = finite_difference_gradient(&clf, &batch, 1e-5);
        for k in 0..c * d {
            if k < frozen_count * d {
                ensure(analytic[k] == 0.0, || {
                    format!("case {case}: frozen entry {k} = {}", analytic[k])
                })?;
            } else {
                ensure(analytic[k] == full[k], || {
                    format!("case {case}: trainable entry {k} changed by freezing")
                })?;
            }
            let err = (full[k] - numeric[k]).abs() / full[k].abs().max(numeric[k].abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    ensure(worst <= 1e-6, || format!("max relative error {worst:.3e} > 1e-6"))?;
    Ok(format!(
        "100 instances, max relative error {worst:.2e}, frozen rows exactly zero"
    ))
}

fn frozen_prototypes_bit_identical() -> Result<String, String> {
    for run in 0..20u64 {
        let spec = SynthSpec {
            class_count: 8,
            dim: 6,
            samples_per_class: 24,
            mean_scale: 3.0,
            within_std: 1.0,
            seed: 500 + run,
        };
        let fs = generate_synthetic(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 16,
            seed: run,
            ..TrainConfig::default()
        };
        let mut clf = PrototypeClassifier::new(6, 1.0, [0.0, 0.3, 1.0][run as usize % 3]).unwrap();
        let mut rng = rng(run);
        let phases: [&[usize]; 4] = [&[0, 1, 2], &[3, 4], &[5], &[6, 7]];
        for (t, classes) in phases.iter().enumerate() {
            let before: Vec<u64> = clf.prototypes().iter().map(|v| v.to_bits()).collect();
            // current classes in full plus a few replayed old samples
            let mut idx: Vec<usize> = (0..fs.n_samples())
                .filter(|&i| classes.contains(&fs.labels()[i]) || (fs.labels()[i] < classes[0] && rng.random_bool(0.2)))
                .collect();
            idx.shuffle(&mut rng);
            let data: Vec<Sample<'_>> = idx.iter().map(|&i| fs.sample(i)).collect();
            clf.train_phase(&data, classes, &cfg).map_err(|e| e.to_string())?;
            let after: Vec<u64> = clf.prototypes()[..before.len()].iter().map(|v| v.to_bits()).collect();
            ensure(before == after, || {
                format!("run {run}, phase {t}: a frozen prototype moved")
            })?;
        }
    }
    Ok("20 runs x 4 phases, every frozen prototype bit-identical".into())
}

fn argmin_distance_equals_linear_rule() -> Result<String, String> {
    let mut rng = rng(303);
    let mut pairs = 0usize;
    for draw in 0..10_000 {
        let c = rng.random_range(2..=12);
        let d = rng.random_range(1..=16);
        let rows: Vec<Vec<f64>> = (0..c).map(|_| uniform_vec(&mut rng, d, -2.0, 2.0)).collect();
        let z = uniform_vec(&mut rng, d, -2.0, 2.0);
        let clf = PrototypeClassifier::from_prototypes(rows.concat(), d, 0, 1.0, 0.3).unwrap();
        let g: Vec<f64> = (0..c).map(|i| clf.linear_discriminant(&z, i).unwrap()).collect();
        let dist: Vec<f64> = rows
            .iter()
            .map(|p| p.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let pred = clf.predict(&z).unwrap();
        ensure(pred == brute_argmax(&g), || {
            format!("draw {draw}: predict {pred} != argmax g")
        })?;
        ensure(pred == brute_argmin(&dist), || {
            format!("draw {draw}: predict {pred} != argmin distance")
        })?;
        for i in 0..c {
            for j in 0..c {
                if i == j {
                    continue;
                }
                let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                let diff: Vec<f64> = rows[i].iter().zip(&rows[j]).map(|(a, b)| a - b).collect();
                let h = dot(&diff, &z) - 0.5 * (dot(&rows[i], &rows[i]) - dot(&rows[j], &rows[j]));
                let by_distance = (dist[j] - dist[i]).signum();
                ensure((g[i] - g[j]).signum() == by_distance, || {
                    format!("draw {draw}: g sign mismatch for ({i},{j})")
                })?;
                ensure(h.signum() == by_distance, || {
                    format!("draw {draw}: hyperplane sign mismatch for ({i},{j})")
                })?;
                pairs += 1;
            }
        }
    }
    Ok(format!("10000 draws, {pairs} ordered pairs agree"))
}

fn pure_prototype_loss_is_nme() -> Result<String, String> {
    let spec = SynthSpec {
        class_count: 10,
        dim: 16,
        samples_per_class: 60,
        mean_scale: 2.0,
        within_std: 1.0,
        seed: 404,
    };
    let fs = generate_synthetic(&spec).unwrap();
    let split = stratified_split(&fs, 0.2, 4).unwrap();
    let train: Vec<Sample<'_>> = split.train.concat().into_iter().map(|i| fs.sample(i)).collect();
    let cfg = TrainConfig {
        batch_size: train.len(),
        objective: Objective::PrototypeOnly,
        ..TrainConfig::default()
    };
    // from the class-mean initialization used by train_phase
    let mut clf = PrototypeClassifier::new(16, 1.0, 0.0).unwrap();
    clf.train_phase(&train, &(0..10).collect::<Vec<_>>(), &cfg)
        .map_err(|e| e.to_string())?;
    // and from an arbitrary start
    let mut rng = rng(44);
    let start = uniform_vec(&mut rng, 10 * 16, -5.0, 5.0);
    let mut far = PrototypeClassifier::from_prototypes(start, 16, 0, 1.0, 0.0).unwrap();
    // each class only sees its share of the mean gradient, so a start far
    // from the mean needs a longer schedule than the per-phase default
    let long = TrainConfig {
        epochs: 1000,
        ..cfg.clone()
    };
    far.fit_trainable(&train, &long).map_err(|e| e.to_string())?;

    let nme = NmeHead::fit(&train, 10, 16, None).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for m in [&clf, &far] {
        for c in 0..10 {
            for (a, b) in m.prototype(c).iter().zip(nme.mean(c)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-4, || format!("max |prototype - mean| = {worst:.3e}"))?;
    let eval = split.eval.concat();
    for &i in &eval {
        let want = nme.predict(fs.row(i)).unwrap();
        ensure(
            clf.predict(fs.row(i)).unwrap() == want && far.predict(fs.row(i)).unwrap() == want,
            || format!("eval sample {i}: prediction differs from NME"),
        )?;
    }
    Ok(format!(
        "max |prototype - mean| {worst:.2e}, {} eval predictions match",
        eval.len()
    ))
}

fn pc_id_cases() -> Result<String, String> {
    let mut rng = rng(505);
    // equal variances in every direction: signs times a constant
    let n = 2000;
    let iso: Vec<f64> = (0..n * 10)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let iso = FeatureSet::new(iso, vec![0; n], 10).unwrap();
    let a = covariance_spectrum(&iso, false).map_err(|e| e.to_string())?;
    // rank one: multiples of a fixed direction
    let dir = uniform_vec(&mut rng, 12, -1.0, 1.0);
    let line: Vec<f64> = (0..200)
        .flat_map(|_| {
            let t: f64 = rng.random_range(-3.0..3.0);
            dir.iter().map(move |v| t * v).collect::<Vec<_>>()
        })
        .collect();
    let line = FeatureSet::new(line, vec![0; 200], 12).unwrap();
    let b = covariance_spectrum(&line, false).map_err(|e| e.to_string())?;
    // ten tight clusters at orthogonal, equally distant centers
    let dim = 64;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for c in 0..10 {
        for _ in 0..50 {
            let mut x: Vec<f64> = (0..dim).map(|_| 1e-3 * rng.random_range(-1.0..1.0)).collect();
            x[c] += 10.0;
            feats.extend(x);
            labels.push(c);
        }
    }
    let clusters = FeatureSet::new(feats, labels, dim).unwrap();
    let k = covariance_spectrum(&clusters, false).map_err(|e| e.to_string())?;

    ensure(a.pc_id == 9, || format!("equal variances: pc_id {} != 9", a.pc_id))?;
    ensure(b.pc_id == 1, || format!("rank one: pc_id {} != 1", b.pc_id))?;
    ensure(k.pc_id == 9, || format!("10 clusters: pc_id {} != 9", k.pc_id))?;
    for (name, fs, r) in [
        ("equal", &iso, &a),
        ("rank-one", &line, &b),
        ("clusters", &clusters, &k),
    ] {
        let tr = independent_trace(fs);
        let sum: f64 = r.eigenvalues.iter().sum();
        ensure((sum - tr).abs() <= 1e-8 * tr, || {
            format!("{name}: eigenvalue sum {sum} vs trace {tr}")
        })?;
    }
    Ok(format!("pc_id {} / {} / {}, traces match", a.pc_id, b.pc_id, k.pc_id))
}

/// Sum of per-coordinate sample variances (divisor n - 1).
fn independent_trace(fs: &FeatureSet) -> f64 {
    let n = fs.n_samples() as f64;
    (0..fs.dim())
        .map(|k| {
            let col: Vec<f64> = (0..fs.n_samples()).map(|i| fs.row(i)[k]).collect();
            let m = col.iter().sum::<f64>() / n;
            col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .sum()
}

fn eigensolver_accuracy() -> Result<String, String> {
    let n = 30;
    let mut worst_res = 0.0f64;
    let mut worst_orth = 0.0f64;
    for seed in 0..50u64 {
        let a = lcg_symmetric(seed * 7919 + 1, n);
        let e = symmetric_eig(&a, n).map_err(|e| e.to_string())?;
        for j in 0..n {
            let v = e.vector(j);
            let lam = e.values[j];
            let res = (0..n)
                .map(|i| ((0..n).map(|k| a[i * n + k] * v[k]).sum::<f64>() - lam * v[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            worst_res = worst_res.max(res / (1.0 + lam.abs()));
            for l in 0..n {
                let w = e.vector(l);
                let dot: f64 = v.iter().zip(&w).map(|(x, y)| x * y).sum();
                let want = if j == l { 1.0 } else { 0.0 };
                worst_orth = worst_orth.max((dot - want).abs());
            }
        }
        ensure(e.values.windows(2).all(|w| w[0] >= w[1]), || {
            format!("seed {seed}: not descending")
        })?;
    }
    ensure(worst_res <= 1e-8, || {
        format!("residual {worst_res:.3e} > 1e-8 (1 + |lambda|)")
    })?;
    ensure(worst_orth <= 1e-8, || format!("orthonormality error {worst_orth:.3e}"))?;

    let a = lcg_symmetric(LCG_REFERENCE_SEED, n);
    let e = symmetric_eig(&a, n).map_err(|e| e.to_string())?;
    let ref_err = e
        .values
        .iter()
        .zip(LCG_REFERENCE_SPECTRUM)
        .map(|(x, r)| (x - r).abs())
        .fold(0.0, f64::max);
    ensure(ref_err <= 1e-9, || format!("reference spectrum off by {ref_err:.3e}"))?;
    Ok(format!(
        "50 matrices: residual {worst_res:.2e}, orthonormality {worst_orth:.2e}; reference off by {ref_err:.2e}"
    ))
}

fn fixture_method(method: Method, lambda: f64) -> f64 {
    let (fs, stream) = fixture();
    let mut cfg = MethodConfig::new(method);
    cfg.lambda = lambda;
    cfg.train.seed = FIXTURE_RUN_SEED;
    run_method(&fs, &stream, &cfg, &fixture_options())
        .unwrap()
        .average_accuracy
}

fn fixture_comparison() -> Result<String, String> {
    let ipc = fixture_method(Method::Ipc, 0.3);
    let linear = fixture_method(Method::Linear, 0.3);
    let cosine = fixture_method(Method::Cosine, 0.3);
    let nme = fixture_method(Method::Nme, 0.3);
    let joint = fixture_method(Method::Joint, 0.3);
    frozen("ipc", ipc, FIXTURE_ACC_IPC)?;
    frozen("linear", linear, FIXTURE_ACC_LINEAR)?;
    frozen("cosine", cosine, FIXTURE_ACC_COSINE)?;
    frozen("nme", nme, FIXTURE_ACC_NME)?;
    frozen("joint", joint, FIXTURE_ACC_JOINT)?;
    ensure(ipc >= linear + 0.10, || {
        format!("ipc {ipc:.4} < linear {linear:.4} + 0.10")
    })?;
    ensure(ipc >= cosine, || format!("ipc {ipc:.4} < cosine {cosine:.4}"))?;
    ensure(ipc >= nme, || format!("ipc {ipc:.4} < nme {nme:.4}"))?;
    ensure((ipc - joint).abs() <= 0.03, || {
        format!("|ipc {ipc:.4} - joint {joint:.4}| > 0.03")
    })?;
    Ok(format!(
        "avg acc ipc {ipc:.4}, linear {linear:.4}, cosine {cosine:.4}, nme {nme:.4}, joint {joint:.4}"
    ))
}

fn lambda_ablation() -> Result<String, String> {
    let acc: Vec<f64> = LAMBDAS.iter().map(|&l| fixture_method(Method::Ipc, l)).collect();
    for (k, (&got, &want)) in acc.iter().zip(&FIXTURE_ACC_LAMBDA).enumerate() {
        frozen(&format!("lambda {}", LAMBDAS[k]), got, want)?;
    }
    let at = |l: f64| acc[LAMBDAS.iter().position(|&x| x == l).unwrap()];
    ensure(at(0.3) >= at(0.0), || format!("A(0.3) {} < A(0) {}", at(0.3), at(0.0)))?;
    ensure(at(0.3) >= at(10.0), || {
        format!("A(0.3) {} < A(10) {}", at(0.3), at(10.0))
    })?;
    let peak = acc
        .iter()
        .enumerate()
        .fold(0, |best, (i, &a)| if a > acc[best] { i } else { best });
    let unimodal = acc[..=peak].windows(2).all(|w| w[0] <= w[1]) && acc[peak..].windows(2).all(|w| w[0] >= w[1]);
    ensure(unimodal, || format!("sweep {acc:?} is not unimodal"))?;
    let shown: Vec<String> = LAMBDAS.iter().zip(&acc).map(|(l, a)| format!("{l}:{a:.4}")).collect();
    Ok(format!("avg acc by lambda {}", shown.join(" ")))
}

fn herding_matches_greedy_oracle() -> Result<String, String> {
    let mut rng = rng(909);
    let mut picked = 0;
    for class in 0..50 {
        let n = rng.random_range(1..=40);
        let d = rng.random_range(1..=16);
        let r = rng.random_range(1..=50);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(&mut rng, d, -3.0, 3.0)).collect();
        let view: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let got = herding_select(&view, r).map_err(|e| e.to_string())?;
        let want = brute_force_herding(&rows, r);
        ensure(got == want, || format!("class {class}: {got:?} != {want:?}"))?;
        picked += got.len();
    }
    Ok(format!("50 classes, {picked} exemplars identical to the oracle"))
}

fn runs_are_deterministic() -> Result<String, String> {
    let spec = SynthSpec {
        class_count: 6,
        dim: 8,
        samples_per_class: 30,
        mean_scale: 3.0,
        within_std: 1.0,
        seed: 1010,
    };
    let fs = generate_synthetic(&spec).unwrap();
    let stream = split_tasks(&fs, 3, 0.5, 3, Some(5)).unwrap();
    let mut cfg = MethodConfig::new(Method::Ipc);
    cfg.train.epochs = 20;
    let opts = fixture_options();
    let first = run_method(&fs, &stream, &cfg, &opts)
        .map_err(|e| e.to_string())?
        .to_json();
    let second = run_method(&fs, &stream, &cfg, &opts)
        .map_err(|e| e.to_string())?
        .to_json();
    ensure(first == second, || "in-process runs differ".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let feats = dir.path().join("f.fset");
    let stream_path = dir.path().join("s.json");
    fs.save(&feats).map_err(|e| e.to_string())?;
    stream.save(&stream_path).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (k, threads) in ["1", "4"].iter().enumerate() {
        let report = dir.path().join(format!("r{k}.json"));
        let status = Command::new(env!("CARGO_BIN_EXE_protocil"))
            .env("PROTOCIL_THREADS", threads)
            .args(["run", "--method", "ipc", "--epochs", "20", "--seed", "7"])
            .arg("--features")
            .arg(&feats)
            .arg("--stream")
            .arg(&stream_path)
            .arg("--report")
            .arg(&report)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("run exited with {status}"))?;
        outputs.push(std::fs::read(&report).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], || {
        "reports from separate processes differ".into()
    })?;
    Ok(format!(
        "{} byte report identical in-process and across 2 processes",
        outputs[0].len()
    ))
}

fn main() {
    let checks: [(&str, Check); 10] = [
        (
            "gradient matches finite differences",
            gradient_matches_finite_differences,
        ),
        ("frozen prototypes bit-identical", frozen_prototypes_bit_identical),
        (
            "nearest prototype equals linear rule",
            argmin_distance_equals_linear_rule,
        ),
        ("pure prototype loss recovers NME", pure_prototype_loss_is_nme),
        ("PC-ID on known spectra", pc_id_cases),
        ("eigensolver accuracy", eigensolver_accuracy),
        ("fixture method comparison", fixture_comparison),
        ("lambda ablation", lambda_ablation),
        ("herding equals greedy oracle", herding_matches_greedy_oracle),
        ("deterministic reports", runs_are_deterministic),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.2}s): {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.2}s): {why}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
