//! `uotalign` command-line interface.
//!
//! Exit codes: 0 success, 1 error, 2 non-convergence, 3 partial failure of an
//! external step.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Status;

#[derive(Parser, Debug)]
#[command(name = "uotalign", version, about = "Entropic OT/UOT solvers and transport-aligned prompt learning")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Strict JSON run configuration with `model`, `classifier`, `solver`, `train`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created when the command succeeds far enough to write.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for batched solving; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve one transport problem from a cost file.
    Solve(commands::solve::SolveArgs),
    /// Contrast balanced OT and UOT on a constructed outlier instance.
    Compare(commands::solve::CompareArgs),
    /// Write a synthetic few-shot dataset.
    Synth(commands::synth::SynthArgs),
    /// Train prompts on a dataset manifest.
    Train(commands::train::TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(commands::train::EvalArgs),
    /// Train and evaluate every ablation variant.
    Ablate(commands::train::DataArgs),
    /// Sweep the marginal weights ρ₁ × ρ₂.
    Sweep(commands::train::SweepArgs),
    /// Dump the per-path couplings of one sample against one class.
    Heatmap(commands::train::HeatmapArgs),
    /// Render description prompts and optionally run them through a command.
    GenDescriptions(commands::describe::DescribeArgs),
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli.global, cli.command) {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => ExitCode::from(2),
        Ok(Status::PartialFailure) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e.chain().any(|c| matches!(c.downcast_ref(), Some(uotalign::Error::Divergence { .. })));
            ExitCode::from(if diverged { 2 } else { 1 })
        }
    }
}
