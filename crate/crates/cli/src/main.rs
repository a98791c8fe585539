//! `knn-adapter`: command-line driver for building datastores, training and evaluating
//! kNN adapters, and analyzing learned coefficients.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use knn_adapter::Error as CoreError;
use serde::Serialize;

use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "knn-adapter",
    version,
    about = "Train and evaluate kNN adapters over LM traces"
)]
struct Cli {
    /// Maximum worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Manifest path, overriding the default next to the main output.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(untagged)]
enum Command {
    /// Generate the synthetic shifted-domain fixture.
    GenToy(GenToyArgs),
    /// Build a datastore from a trace's (embedding, gold) pairs.
    BuildDatastore(BuildDatastoreArgs),
    /// Train an adapter variant by SGD.
    Train(TrainArgs),
    /// Grid-search the fixed (λ, t) kNN-LM baseline.
    Tune(TuneArgs),
    /// Perplexity of models over datastores and access modes.
    Eval(EvalArgs),
    /// Correlate learned coefficients with token frequency and group them by tag.
    Analyze(AnalyzeArgs),
    /// Train once per initial coefficient and emit the convergence curves.
    SweepInit(SweepInitArgs),
    /// Check a trace, datastore or embedding-matrix file.
    Validate(ValidateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenToy(_) => "gen-toy",
            Command::BuildDatastore(_) => "build-datastore",
            Command::Train(_) => "train",
            Command::Tune(_) => "tune",
            Command::Eval(_) => "eval",
            Command::Analyze(_) => "analyze",
            Command::SweepInit(_) => "sweep-init",
            Command::Validate(_) => "validate",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricArg {
    SquaredL2,
    L2,
}

impl From<MetricArg> for knn_adapter::Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::SquaredL2 => knn_adapter::Metric::SquaredL2,
            MetricArg::L2 => knn_adapter::Metric::L2,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = knn_adapter::toy::DEFAULT_SOURCE_SEED)]
    pub source_seed: u64,
    #[arg(long, default_value_t = knn_adapter::toy::DEFAULT_TARGET_SEED)]
    pub target_seed: u64,
    #[arg(long, default_value_t = knn_adapter::toy::DEFAULT_VOCAB)]
    pub vocab: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Neighbors per query; must not exceed the datastore size.
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    /// source_corpus,datastore,validation,test
    #[arg(long, default_value = "100000,20000,2000,2000")]
    pub sizes: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildDatastoreArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::SquaredL2)]
    pub metric: MetricArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// JSON has no infinities; those are echoed as "inf" / "-inf".
fn float_or_string<S: serde::Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_str(&x.to_string())
    }
}

/// Options shared by the training commands.
#[derive(Debug, Args, Serialize)]
pub struct TrainOpts {
    #[arg(long, default_value = "token×single")]
    pub variant: String,
    #[arg(long)]
    pub init_t: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative epoch improvement below which training stops; -inf disables.
    #[arg(long, default_value_t = 1e-4, allow_hyphen_values = true)]
    #[serde(serialize_with = "float_or_string")]
    pub plateau_tol: f64,
    /// full or top-q
    #[arg(long, default_value = "full")]
    pub access: String,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    /// Token embedding matrix, required by the context-aware variants.
    #[arg(long)]
    pub w: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub train_trace: PathBuf,
    #[arg(long)]
    pub datastore: PathBuf,
    #[arg(long)]
    pub init_lambda: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub out_params: PathBuf,
    /// Per-epoch CSV; defaults to <out-params>.epochs.csv.
    #[arg(long)]
    pub curve_csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TuneArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub datastore: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value = "full")]
    pub access: String,
    /// Comma-separated λ values; default 0, 0.05, ..., 1.
    #[arg(long)]
    pub lambda_grid: Option<String>,
    /// Comma-separated temperatures.
    #[arg(long, default_value = "0.5,1,2,5,10")]
    pub temp_grid: String,
    #[arg(long)]
    pub out_params: PathBuf,
    /// Every grid cell as lambda,t,mean_nll.
    #[arg(long)]
    pub grid_csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub test_trace: PathBuf,
    /// Datastore as PATH or LABEL=PATH; repeatable.
    #[arg(long)]
    pub datastore: Vec<String>,
    /// Trained or tuned parameter file.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, requires = "fixed_t")]
    pub fixed_lambda: Option<f64>,
    #[arg(long, requires = "fixed_lambda")]
    pub fixed_t: Option<f64>,
    /// Include the standard LM.
    #[arg(long)]
    pub standard: bool,
    /// Neighbors for --fixed-lambda.
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long)]
    pub w: Option<PathBuf>,
    /// full or top-q; repeatable.
    #[arg(long, default_values_t = vec!["full".to_string()])]
    pub access: Vec<String>,
    /// Results CSV: model,datastore,access_mode,tokens,mean_nll,perplexity.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub params: PathBuf,
    /// Adds the datastore's value frequencies as a correlation source.
    #[arg(long)]
    pub datastore: Option<PathBuf>,
    /// Frequency file (id<TAB>count) as PATH or LABEL=PATH; repeatable.
    #[arg(long)]
    pub freq_file: Vec<String>,
    /// Tag file (id<TAB>tag).
    #[arg(long)]
    pub tag_file: Option<PathBuf>,
    #[arg(long, default_value_t = knn_adapter::analysis::DEFAULT_MIN_GROUP)]
    pub min_group: usize,
    #[arg(long)]
    pub w: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepInitArgs {
    #[arg(long)]
    pub train_trace: PathBuf,
    #[arg(long)]
    pub datastore: PathBuf,
    /// Scored with each trained adapter when given.
    #[arg(long)]
    pub eval_trace: Option<PathBuf>,
    #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    pub inits: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    pub path: PathBuf,
    /// Stop at the first violation.
    #[arg(long)]
    pub strict: bool,
}

/// Flag or configuration error raised by the CLI itself.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Failure carrying its own exit code, e.g. a trace with violations.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

fn core_kind(e: &CoreError) -> String {
    let debug = format!("{e:?}");
    debug
        .split(|c: char| !c.is_ascii_alphanumeric())
        .next()
        .unwrap_or("Error")
        .to_string()
}

fn core_code(e: &CoreError) -> u8 {
    use CoreError::*;
    match e {
        NonFiniteLoss { .. } | ZeroMass | DegenerateInput(_) => EXIT_NUMERIC,
        Io(_)
        | ConsistencyViolation(_)
        | TokenOutOfRange { .. }
        | InvalidDistribution(_)
        | MassExceedsOne(_)
        | EmptyInput
        | EmptyCorpus => EXIT_DATA,
        e if e.is_format_error() => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

fn classify(err: &anyhow::Error) -> (u8, String) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return (e.code, e.kind.to_string());
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return (core_code(e), core_kind(e));
        }
        if cause.downcast_ref::<Usage>().is_some() {
            return (EXIT_USAGE, "Usage".into());
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (EXIT_DATA, "Io".into());
        }
    }
    (EXIT_USAGE, "Usage".into())
}

/// The context chain down to the first core error, whose own source it already displays.
fn message(err: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in err.chain() {
        parts.push(cause.to_string());
        if cause.downcast_ref::<CoreError>().is_some() {
            break;
        }
    }
    parts.join(": ")
}

fn report(code: u8, kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": { "code": code, "kind": kind, "message": message } });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let outcome = match &cli.command {
        Command::GenToy(a) => commands::gen_toy(a)?,
        Command::BuildDatastore(a) => commands::build_datastore(a)?,
        Command::Train(a) => commands::train(a)?,
        Command::Tune(a) => commands::tune(a)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Analyze(a) => commands::analyze(a)?,
        Command::SweepInit(a) => commands::sweep_init(a)?,
        Command::Validate(a) => commands::validate(a)?,
    };
    if let Some(path) = cli.manifest.clone().or_else(|| outcome.manifest.clone()) {
        let argv = std::env::args().skip(1).collect();
        let config = serde_json::to_value(&cli.command)?;
        RunManifest::build(cli.command.name(), argv, config, &outcome)?.write(&path)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            return report(EXIT_USAGE, "Usage", first.trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            report(code, &kind, &message(&e))
        }
    }
}
