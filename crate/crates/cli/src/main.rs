//! `graphfnp` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "graphfnp", version, about = "Graph functional neural process with decodable class rationales")]
pub struct Cli {
    /// TOML training configuration; defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Ablation switches (no_zD, no_C, no_zR, no_EM); repeatable.
    #[arg(long, global = true)]
    pub ablation: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset or re-export a TU dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints, losses and a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint: metrics JSON and reliability CSV.
    Eval(EvalArgs),
    /// Decode rationales for a graph or for a rationale index.
    Explain(ExplainArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    BaMotif,
    Tu,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Smallest and largest base size for BA-motif graphs.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub ba_nodes: Option<Vec<usize>>,
    /// Source folder for `--kind tu`.
    #[arg(long)]
    pub tu_dir: Option<PathBuf>,
    /// Dataset name inside `--tu-dir`; discovered when absent.
    #[arg(long)]
    pub tu_name: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TU-format dataset folder.
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
    /// Fit a temperature on the validation split and report ECE before and after.
    #[arg(long)]
    pub temperature_scale: bool,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset holding `--graph-id`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, conflicts_with = "rationale_index", required_unless_present = "rationale_index")]
    pub graph_id: Option<String>,
    #[arg(long)]
    pub rationale_index: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub decodes: usize,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

/// Configuration and argument problems are usage errors; everything else is a runtime failure.
impl From<graphfnp::Error> for Failure {
    fn from(e: graphfnp::Error) -> Self {
        match e {
            graphfnp::Error::Config(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("GRAPHFNP_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::Usage(anyhow::anyhow!("GRAPHFNP_NUM_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let code = failure.code();
            match failure {
                Failure::Usage(e) => eprintln!("error: {e:#}\n\nRun `graphfnp --help` for usage."),
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(code)
        }
    }
}
