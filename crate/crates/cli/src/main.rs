//! `ckarank`: profile layer drift, allocate adapter ranks, train and ablate.
//!
//! Exit codes: 0 success, 1 I/O or malformed input, 2 usage or invalid
//! configuration, 3 numeric failure.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ckarank_core::Error;

/// Environment variable that overrides every configured seed.
pub const SEED_ENV: &str = "CKARANK_SEED";

#[derive(Parser, Debug)]
#[command(name = "ckarank", version, about = "CKA-guided low-rank adapter allocation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a default run or pretraining config to edit.
    InitConfig(InitConfigArgs),
    /// Pretrain the backbone on source scenes and save it as a checkpoint.
    Pretrain(PretrainArgs),
    /// Render scenes and dump per-layer pooled activations of a checkpoint.
    DumpActivations(DumpArgs),
    /// Per-layer CKA between two activation dumps, with bootstrap spread.
    Analyze(AnalyzeArgs),
    /// Turn a CKA profile into a rank plan.
    Allocate(AllocateArgs),
    /// Train adapters for a plan on target scenes.
    Train(TrainArgs),
    /// Run an ablation suite.
    Ablate(AblateArgs),
    /// Consolidate run artifacts into tables.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConfigKind {
    Run,
    Pretrain,
}

#[derive(Args, Debug)]
pub struct InitConfigArgs {
    #[arg(long, value_enum, default_value = "run")]
    pub kind: ConfigKind,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Pretraining config (JSON); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub domain: DomainArg,
    /// Run config supplying the target corruption; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    /// Scene seed. Use the same seed for both domains to pair the scenes.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Bootstrap resamples of the sample rows (0 disables, otherwise at least 2).
    #[arg(long = "seeds", default_value_t = 20)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub bootstrap_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AllocateArgs {
    #[arg(long)]
    pub profile: PathBuf,
    /// Lower and upper rho thresholds.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7", conflicts_with = "bands")]
    pub thresholds: Vec<f64>,
    /// Place the thresholds at profile quantiles giving these shallow,
    /// middle and deep layer counts instead.
    #[arg(long, value_delimiter = ',')]
    pub bands: Option<Vec<usize>>,
    /// Shallow, middle and deep ranks.
    #[arg(long, value_delimiter = ',', default_value = "16,8,4")]
    pub ranks: Vec<usize>,
    /// Model width, optionally followed by the non-adapter trainable count.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub dims: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    /// Checkpoint holding the pretrained backbone.
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured epoch count; 0 records zero-shot metrics only.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Label written to the strategy column.
    #[arg(long, default_value = "custom")]
    pub strategy: String,
    /// Train without the depth stream.
    #[arg(long)]
    pub no_depth: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Ranks,
    Lambda,
    Components,
    BoundaryShift,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub suite: SuiteArg,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Suite values: strategy names, λ values or integer shifts.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
    /// Shallow, middle and deep ranks of the guided plan.
    #[arg(long, value_delimiter = ',', default_value = "8,4,2")]
    pub ranks: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Markdown,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: Format,
    /// Write here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Parse { .. } | Error::Csv(_) => 1,
        Error::Json(j) if !j.is_data() => 1,
        Error::NonFinite(_)
        | Error::NanLoss { .. }
        | Error::NoConvergence { .. }
        | Error::UndefinedCondition(_)
        | Error::Degenerate(_)
        | Error::UndefinedMetric(_)
        | Error::PretrainingFailed { .. } => 3,
        _ => 2,
    }
}

/// Seed from [`SEED_ENV`], if set.
pub fn seed_override() -> ckarank_core::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Argument(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::InitConfig(a) => commands::init_config(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::DumpActivations(a) => commands::dump_activations(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Allocate(a) => commands::allocate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Report(a) => report::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
