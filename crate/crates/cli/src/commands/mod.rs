pub mod describe;
pub mod solve;
pub mod synth;
pub mod train;

use std::fs;

use anyhow::{Context, Result};
use uotalign::trainer::RunConfig;

use crate::{Command, Global};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    NotConverged,
    PartialFailure,
}

/// The strict run configuration, or defaults, with `--seed` applied to
/// the training seed.
pub fn run_config(global: &Global) -> Result<RunConfig> {
    let mut run = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text).with_context(|| format!("invalid config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        run.train.seed = seed;
    }
    Ok(run)
}

pub fn run(global: &Global, command: Command) -> Result<Status> {
    match command {
        Command::Solve(a) => solve::solve(global, &a),
        Command::Compare(a) => solve::compare(global, &a),
        Command::Synth(a) => synth::synth(global, &a),
        Command::Train(a) => train::train(global, &a),
        Command::Eval(a) => train::eval(global, &a),
        Command::Ablate(a) => train::ablate(global, &a),
        Command::Sweep(a) => train::sweep(global, &a),
        Command::Heatmap(a) => train::heatmap(global, &a),
        Command::GenDescriptions(a) => describe::gen_descriptions(global, &a),
    }
}
