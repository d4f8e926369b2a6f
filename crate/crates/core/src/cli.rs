//! `protocil` command line front end.
//!
//! Every subcommand accepts `--config FILE`, a `key=value` file whose keys
//! are the subcommand's long flag names. Flags given on the command line win
//! over the file; unknown keys are rejected.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tracing::info;

use crate::diagnostics::{cosine_matrix, covariance_spectrum};
use crate::featureset::{generate_synthetic, split_tasks, FeatureSet, SynthSpec, TaskStream};
use crate::harness::{reports_to_table, run_cil, run_method, IpcLearner, Method, MethodConfig, RunOptions, RunReport};
use crate::ipc::{DEFAULT_GAMMA, DEFAULT_LAMBDA};
use crate::optim::{LrSchedule, Objective, TrainConfig};
use crate::{Error, ErrorCategory, Result};

pub const THREADS_ENV: &str = "PROTOCIL_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "protocil",
    version,
    about = "Class-incremental learning with prototype classifiers over frozen embeddings"
)]
pub struct Cli {
    /// Log level for diagnostics on stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded Gaussian-mixture feature set.
    GenSynth(GenSynthArgs),
    /// Split a feature set into a base phase and equal incremental phases.
    Split(SplitArgs),
    /// Train the incremental prototype classifier through a task stream.
    Train(TrainArgs),
    /// Run a baseline classifier through a task stream.
    Baseline(BaselineArgs),
    /// Covariance spectrum, PC-ID and cosine-similarity matrix of a feature set.
    Diagnose(DiagnoseArgs),
    /// Run any method through a task stream and write a report.
    Run(RunArgs),
    /// Aggregate run reports into one CSV table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

impl From<ScheduleArg> for LrSchedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Constant => LrSchedule::Constant,
            ScheduleArg::Cosine => LrSchedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Hybrid,
    PrototypeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ipc,
    Linear,
    Cosine,
    Nme,
    Joint,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ipc => Method::Ipc,
            MethodArg::Linear => Method::Linear,
            MethodArg::Cosine => Method::Cosine,
            MethodArg::Nme => Method::Nme,
            MethodArg::Joint => Method::Joint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Linear,
    Cosine,
    Nme,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// key=value file supplying defaults for this subcommand's flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub per_class: usize,
    /// Radius of the sphere the class means are drawn from.
    #[arg(long, default_value_t = 10.0)]
    pub mean_scale: f64,
    /// Within-class standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path; `.csv` writes labeled CSV, anything else FEATSET.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Number of incremental phases after the base phase.
    #[arg(long, default_value_t = 5)]
    pub phases: usize,
    /// Share of classes in the base phase.
    #[arg(long, default_value_t = 0.5)]
    pub base_fraction: f64,
    /// Exemplars kept per old class (R).
    #[arg(long, default_value_t = 0)]
    pub replay: usize,
    /// Shuffle the class order with this seed (sorted ids when omitted).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    pub momentum: f64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Cosine)]
    pub schedule: ScheduleArg,
}

#[derive(Debug, Args, Clone)]
pub struct ProtocolArgs {
    /// Overrides the stream's exemplars per old class (R).
    #[arg(long)]
    pub replay: Option<usize>,
    /// Held-out share of every class for evaluation.
    #[arg(long, default_value_t = crate::harness::DEFAULT_EVAL_FRACTION)]
    pub eval_fraction: f64,
    /// L2-normalize features before training and evaluation.
    #[arg(long)]
    pub l2_normalize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    /// Distance-softmax temperature.
    #[arg(long, default_value_t = DEFAULT_GAMMA, allow_negative_numbers = true)]
    pub gamma: f64,
    /// Prototype-loss weight.
    #[arg(long, default_value_t = DEFAULT_LAMBDA, allow_negative_numbers = true)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Hybrid)]
    pub objective: ObjectiveArg,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[arg(long)]
    pub checkpoint_out: PathBuf,
    #[arg(long)]
    pub report_out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub kind: BaselineKind,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[arg(long)]
    pub report_out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// L2-normalize features before computing the covariance.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub normalize: Toggle,
    #[arg(long, default_value_t = 50)]
    pub max_per_class: usize,
    /// Seeds the per-class subsample of the cosine matrix.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes <prefix>.spectrum.csv, <prefix>.pcid.json and <prefix>.cosine.csv.
    #[arg(long)]
    pub out_prefix: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_GAMMA, allow_negative_numbers = true)]
    pub gamma: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA, allow_negative_numbers = true)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Hybrid)]
    pub objective: ObjectiveArg,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn train_config(optim: &OptimArgs, seed: u64, objective: ObjectiveArg) -> TrainConfig {
    TrainConfig {
        epochs: optim.epochs,
        batch_size: optim.batch,
        learning_rate: optim.lr,
        momentum: optim.momentum,
        lr_schedule: optim.schedule.into(),
        seed,
        objective: match objective {
            ObjectiveArg::Hybrid => Objective::Hybrid,
            ObjectiveArg::PrototypeOnly => Objective::PrototypeOnly,
        },
    }
}

fn run_options(p: &ProtocolArgs) -> RunOptions {
    RunOptions {
        eval_fraction: p.eval_fraction,
        seed: p.seed,
        memory_per_class: p.replay,
        l2_normalize: p.l2_normalize,
    }
}

fn load_inputs(features: &Path, stream: &Path) -> Result<(FeatureSet, TaskStream)> {
    let fs = FeatureSet::load(features)?;
    let stream = TaskStream::load(stream)?;
    Ok((fs, stream))
}

fn echo_paths(report: &mut RunReport, features: &Path, stream: &Path) {
    report
        .config_echo
        .insert("features".into(), json!(features.display().to_string()));
    report
        .config_echo
        .insert("stream".into(), json!(stream.display().to_string()));
}

fn cmd_gen_synth(a: &GenSynthArgs) -> Result<()> {
    let spec = SynthSpec {
        class_count: a.classes,
        dim: a.dim,
        samples_per_class: a.per_class,
        mean_scale: a.mean_scale,
        within_std: a.std,
        seed: a.seed,
    };
    let fs = generate_synthetic(&spec).map_err(Error::Config)?;
    fs.save(&a.out)?;
    info!(path = %a.out.display(), n = fs.n_samples(), "synthetic feature set written");
    Ok(())
}

fn cmd_split(a: &SplitArgs) -> Result<()> {
    let fs = FeatureSet::load(&a.input)?;
    let stream = split_tasks(&fs, a.phases, a.base_fraction, a.replay, a.seed)?;
    stream.save(&a.out)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (fs, stream) = load_inputs(&a.features, &a.stream)?;
    let method = MethodConfig {
        method: Method::Ipc,
        gamma: a.gamma,
        lambda: a.lambda,
        train: train_config(&a.optim, a.protocol.seed, a.objective),
    };
    method.validate()?;
    let opts = run_options(&a.protocol);
    let mut learner = IpcLearner::new(fs.dim(), a.gamma, a.lambda, method.train.clone())?;
    let mut report = run_cil(&fs, &stream, &mut learner, "ipc", &opts)?;
    add_method_echo(&mut report, &method);
    echo_paths(&mut report, &a.features, &a.stream);
    learner.classifier.save_checkpoint(&a.checkpoint_out)?;
    write_file(&a.report_out, report.to_json())
}

fn add_method_echo(report: &mut RunReport, method: &MethodConfig) {
    let t = &method.train;
    let echo = &mut report.config_echo;
    echo.insert("gamma".into(), json!(method.gamma));
    echo.insert("lambda".into(), json!(method.lambda));
    echo.insert("epochs".into(), json!(t.epochs));
    echo.insert("batch_size".into(), json!(t.batch_size));
    echo.insert("learning_rate".into(), json!(t.learning_rate));
    echo.insert("momentum".into(), json!(t.momentum));
    echo.insert("lr_schedule".into(), json!(t.lr_schedule));
    echo.insert("train_seed".into(), json!(t.seed));
    echo.insert("objective".into(), json!(t.objective));
}

fn cmd_baseline(a: &BaselineArgs) -> Result<()> {
    let (fs, stream) = load_inputs(&a.features, &a.stream)?;
    let method = MethodConfig {
        method: match a.kind {
            BaselineKind::Linear => Method::Linear,
            BaselineKind::Cosine => Method::Cosine,
            BaselineKind::Nme => Method::Nme,
        },
        train: train_config(&a.optim, a.protocol.seed, ObjectiveArg::Hybrid),
        ..MethodConfig::new(Method::Linear)
    };
    let mut report = run_method(&fs, &stream, &method, &run_options(&a.protocol))?;
    echo_paths(&mut report, &a.features, &a.stream);
    write_file(&a.report_out, report.to_json())
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let method = MethodConfig {
        method: a.method.into(),
        gamma: a.gamma,
        lambda: a.lambda,
        train: train_config(&a.optim, a.protocol.seed, a.objective),
    };
    method.validate()?;
    let (fs, stream) = load_inputs(&a.features, &a.stream)?;
    let mut report = run_method(&fs, &stream, &method, &run_options(&a.protocol))?;
    echo_paths(&mut report, &a.features, &a.stream);
    write_file(&a.report, report.to_json())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let fs = FeatureSet::load(&a.features)?;
    let normalize = a.normalize == Toggle::On;
    let spectrum = covariance_spectrum(&fs, normalize)?;
    if spectrum.degenerate {
        tracing::warn!("all samples identical: zero covariance, pc_id reported as 0");
    }
    let cosine = cosine_matrix(&fs, a.max_per_class, a.seed)?;

    let spectrum_path = with_suffix(&a.out_prefix, ".spectrum.csv");
    let mut buf = Vec::new();
    spectrum.write_csv(&mut buf).map_err(io_err(&spectrum_path))?;
    write_file(&spectrum_path, buf)?;

    let cosine_path = with_suffix(&a.out_prefix, ".cosine.csv");
    let mut buf = Vec::new();
    cosine.write_csv(&mut buf).map_err(io_err(&cosine_path))?;
    write_file(&cosine_path, buf)?;

    let summary = json!({
        "version": crate::VERSION,
        "features": a.features.display().to_string(),
        "normalize": normalize,
        "n_samples": spectrum.n_samples,
        "dim": spectrum.dim,
        "pc_id": spectrum.pc_id,
        "degenerate": spectrum.degenerate,
        "trace": spectrum.trace,
        "cosine": {
            "max_per_class": a.max_per_class,
            "seed": a.seed,
            "samples": cosine.size(),
            "within_mean": cosine.within_mean,
            "between_mean": cosine.between_mean,
            "class_boundaries": cosine.class_boundaries,
        },
    });
    let pcid_path = with_suffix(&a.out_prefix, ".pcid.json");
    write_file(&pcid_path, serde_json::to_string_pretty(&summary).expect("json") + "\n")
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(a.inputs.len());
    for path in &a.inputs {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let report = RunReport::from_json(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        reports.push((path.display().to_string(), report));
    }
    write_file(&a.out, reports_to_table(&reports))
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses a `key=value` config file. Blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("config line {}: duplicate key {key}", n + 1)));
        }
    }
    Ok(out)
}

/// Splices values from `--config FILE` into `argv` for every flag the
/// command line does not already set.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config_path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            config_path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_string());
        }
    }
    let Some(config_path) = config_path else {
        return Ok(argv);
    };
    let root = Cli::command();
    let Some((sub_pos, sub)) = args
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| root.find_subcommand(a).map(|s| (i, s)))
    else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&config_path).map_err(io_err(Path::new(&config_path)))?;
    let entries = parse_config_file(&text)?;

    let present = |flag: &str| {
        let long = format!("--{flag}");
        let with_eq = format!("{long}=");
        args.iter().any(|a| *a == long || a.starts_with(&with_eq))
    };
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in &entries {
        if key == "config" || key == "log-level" {
            return Err(Error::Config(format!(
                "config key {key} is not allowed in a config file"
            )));
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| Error::Config(format!("unknown config key {key} for {}", sub.get_name())))?;
        if present(key) {
            continue;
        }
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}").into());
            injected.extend(value.split_whitespace().map(OsString::from));
        } else {
            match value.as_str() {
                "true" | "on" | "1" => injected.push(format!("--{key}").into()),
                "false" | "off" | "0" => {}
                other => {
                    return Err(Error::Config(format!(
                        "config key {key}: expected true/false, got {other}"
                    )));
                }
            }
        }
    }
    let mut out = argv;
    out.splice(sub_pos + 1..sub_pos + 1, injected);
    Ok(out)
}

fn report_error(category: ErrorCategory, message: &str) -> i32 {
    let line = message.lines().next().unwrap_or("").trim();
    let _ = writeln!(std::io::stderr(), "error[{}]: {}", category.as_str(), line);
    category.exit_code()
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got {raw:?}")))?;
    if n > 0 {
        // ignore the error when a pool is already installed (tests, embedding)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Full entry point: returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => return report_error(e.category(), &e.to_string()),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let rendered = e.to_string();
            let msg = rendered.trim_start_matches("error: ");
            return report_error(ErrorCategory::Usage, msg);
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(&cli.log_level));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
    if let Err(e) = init_threads() {
        return report_error(e.category(), &e.to_string());
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => report_error(e.category(), &e.to_string()),
    }
}
