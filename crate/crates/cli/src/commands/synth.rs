use anyhow::Result;
use clap::Args;
use uotalign::features::{synth_dataset, Split, SynthSpec};

use super::Status;
use crate::Global;

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Samples per class; half train, a quarter each val and test.
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    /// Local embeddings per sample.
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Scale of the class anchor relative to unit Gaussian noise.
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    /// Shots recorded in the manifest.
    #[arg(long, default_value_t = 4)]
    pub shots: usize,
}

pub fn synth(global: &Global, args: &SynthArgs) -> Result<Status> {
    let spec = SynthSpec {
        num_classes: args.classes,
        per_class: args.per_class,
        tokens: args.tokens,
        dim: args.dim,
        separation: args.separation,
        seed: global.seed.unwrap_or(0),
        shots: args.shots,
    };
    let manifest = synth_dataset(&spec, &global.out)?;
    println!(
        "wrote {} classes to {}: {} train, {} val, {} test samples",
        manifest.classes.len(),
        global.out.display(),
        manifest.split(Split::Train).len(),
        manifest.split(Split::Val).len(),
        manifest.split(Split::Test).len()
    );
    Ok(Status::Success)
}
