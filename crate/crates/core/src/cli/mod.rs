//! Command-line entry point. `run` parses argv, executes one command and
//! returns the process exit code: 0 on success, 2 for usage and
//! configuration errors, 1 for anything that fails at run time.

mod commands;
mod config;

pub use commands::{parse_grid, stage_name, Stage};
pub use config::{CorpusSection, ModelShape, RunConfig};

use crate::error::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::path::PathBuf;

/// Overrides the output root (default `runs`).
pub const OUT_ENV: &str = "POLYPRUNE_RUNS";

#[derive(Parser, Debug)]
#[command(name = "polyprune", version, about = "Structured pruning of gated transformer encoders")]
pub struct Cli {
    /// TOML run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// directory name under the output root
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// output root (overrides the environment and the config file)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// root seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic multilingual corpus
    GenCorpus(GenCorpusArgs),
    /// Dense MLM pre-training of the baseline
    Pretrain(TrainArgs),
    /// Prune the baseline with gradient ranking or L0 gates
    Prune(PruneArgs),
    /// Train one model for every sparsity on the grid
    DsTrain(DsArgs),
    /// Probe accuracy of a stage
    EvalProbe(ProbeArgs),
    /// Probe accuracy, size and throughput of a DS model across sparsities
    Sweep(SweepArgs),
    /// CPU throughput of compacted subnetworks
    Bench(BenchArgs),
    /// Write a report CSV from finished artifacts
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenCorpusArgs {
    /// comma-separated language ids
    #[arg(long)]
    pub languages: Option<String>,
    /// `id,family,size,seed` CSV
    #[arg(long)]
    pub specs: Option<PathBuf>,
    #[arg(long)]
    pub min_tokens: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct PruneArgs {
    /// grad, l0 or l0-improved
    #[arg(long)]
    pub algo: Option<String>,
    /// shared or non-shared
    #[arg(long)]
    pub setting: Option<String>,
    /// retained encoder fraction t = 1 − sparsity
    #[arg(long)]
    pub target_size: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug, Default)]
pub struct DsArgs {
    /// ds-grad or ds-l0
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub setting: Option<String>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug, Default)]
pub struct ProbeArgs {
    /// stage directory inside the run (default: baseline)
    #[arg(long)]
    pub model: Option<String>,
    /// sparsity at which to evaluate a DS stage
    #[arg(long)]
    pub sparsity: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// DS stage (default: the one the config's `[ds]` section names)
    #[arg(long)]
    pub model: Option<String>,
    /// sparsities as `start:end:step`, inclusive
    #[arg(long, default_value = "0.1:0.9:0.2")]
    pub grid: String,
    /// skip throughput timing
    #[arg(long)]
    pub no_bench: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// stage to time (default: baseline, pruned along a random ranking)
    #[arg(long)]
    pub model: Option<String>,
    /// sparsities as `start:end:step` or a comma list
    #[arg(long, default_value = "0.1,0.9")]
    pub sparsities: String,
    /// also time each level at twice the batch size
    #[arg(long)]
    pub batch_doubling: bool,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub passes: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    /// per-layer head and hidden-unit sparsity
    LayerProfile,
    /// per-kind sparsity against both overall sparsity axes
    ComponentProfile,
    /// parameter count across the grid
    SizeCurve,
    /// pairwise Hamming distance between language subnetworks
    Hamming,
    /// accuracy loss against log corpus size
    Corr,
    /// throughput records from `bench`
    Throughput,
}

impl Figure {
    pub fn as_str(self) -> &'static str {
        match self {
            Figure::LayerProfile => "layer-profile",
            Figure::ComponentProfile => "component-profile",
            Figure::SizeCurve => "size-curve",
            Figure::Hamming => "hamming",
            Figure::Corr => "corr",
            Figure::Throughput => "throughput",
        }
    }
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, value_enum)]
    pub figure: Figure,
    /// stage to report on
    #[arg(long)]
    pub model: Option<String>,
    /// sparsity for DS stages where one is needed
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// size curve of the base-size configuration under a synthetic ranking
    #[arg(long)]
    pub dry_run: bool,
}

/// Exit code for an error: configuration problems are the caller's to fix.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parse and execute; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<()> {
    let ctx = commands::Context::new(&cli, argv)?;
    match &cli.command {
        Command::GenCorpus(a) => ctx.gen_corpus(a),
        Command::Pretrain(a) => ctx.pretrain(a),
        Command::Prune(a) => ctx.prune(a),
        Command::DsTrain(a) => ctx.ds_train(a),
        Command::EvalProbe(a) => ctx.eval_probe(a),
        Command::Sweep(a) => ctx.sweep(a),
        Command::Bench(a) => ctx.bench(a),
        Command::Report(a) => ctx.report(a),
    }
}
