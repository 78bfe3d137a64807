use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use uotalign::classifier::{score, Path as AlignPath};
use uotalign::features::{DatasetManifest, Split};
use uotalign::prompt::{load_description_manifest, DescriptionFile};
use uotalign::trainer::{
    evaluate, history_csv, load_checkpoint, run_ablation, save_checkpoint, train as train_prompts, Metrics, RunConfig,
    TrainState,
};

use super::{run_config, Status};
use crate::io::{ensure_dir, parse_list, parse_rho, rho_json, write_csv, write_json};
use crate::Global;

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset manifest (`manifest.json`).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Description manifest; defaults to `descriptions.json` next to the dataset manifest.
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<(DatasetManifest, Vec<DescriptionFile>)> {
        let manifest = DatasetManifest::load(&self.manifest)
            .with_context(|| format!("cannot load dataset manifest {}", self.manifest.display()))?;
        let path = match &self.descriptions {
            Some(p) => p.clone(),
            None => self.manifest.parent().unwrap_or(Path::new(".")).join("descriptions.json"),
        };
        let files =
            load_description_manifest(&path).with_context(|| format!("cannot load descriptions {}", path.display()))?;
        Ok((manifest, files))
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated class subset that competes during training.
    #[arg(long)]
    pub classes: Option<String>,
}

fn class_list(arg: &Option<String>) -> Result<Option<Vec<String>>> {
    arg.as_deref().map(|s| parse_list(s, |t| Ok::<_, String>(t.to_string()))).transpose()
}

#[derive(Serialize)]
struct SplitMetrics {
    train: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    val: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<Metrics>,
}

fn split_metrics(manifest: &DatasetManifest, state: &TrainState, classes: Option<&[String]>) -> Result<SplitMetrics> {
    let optional = |split| -> Result<Option<Metrics>> {
        if manifest.split(split).is_empty() {
            Ok(None)
        } else {
            Ok(Some(evaluate(manifest, split, state, classes)?))
        }
    };
    Ok(SplitMetrics {
        train: evaluate(manifest, Split::Train, state, classes)?,
        val: optional(Split::Val)?,
        test: optional(Split::Test)?,
    })
}

pub fn train(global: &Global, args: &TrainArgs) -> Result<Status> {
    let mut run = run_config(global)?;
    let (manifest, files) = args.data.load()?;
    if let Some(classes) = class_list(&args.classes)? {
        run.train.classes = Some(classes);
    }
    let state = train_prompts(&manifest, &files, &run)?;
    let metrics = split_metrics(&manifest, &state, run.train.classes.as_deref())?;

    ensure_dir(&global.out)?;
    save_checkpoint(global.out.join("checkpoint.ckpt"), &state)?;
    fs::write(global.out.join("history.csv"), history_csv(&state.history))?;
    write_json(&global.out.join("metrics.json"), &metrics)?;
    write_json(&global.out.join("config.json"), &run)?;
    println!(
        "variant {}: train accuracy {:.4}{}",
        state.variant.name(),
        metrics.train.accuracy,
        metrics.test.as_ref().map_or(String::new(), |m| format!(", test accuracy {:.4}", m.accuracy))
    );
    Ok(Status::Success)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Comma-separated class subset; only these compete and are scored.
    #[arg(long)]
    pub classes: Option<String>,
}

pub fn eval(global: &Global, args: &EvalArgs) -> Result<Status> {
    let manifest = DatasetManifest::load(&args.data.manifest)
        .with_context(|| format!("cannot load dataset manifest {}", args.data.manifest.display()))?;
    let state = load_checkpoint(&args.checkpoint)?;
    let classes = class_list(&args.classes)?;
    let metrics = evaluate(&manifest, args.split, &state, classes.as_deref())?;
    ensure_dir(&global.out)?;
    write_json(&global.out.join(format!("eval_{}.json", args.split.name())), &metrics)?;
    println!("{} accuracy {:.4} over {} samples", args.split.name(), metrics.accuracy, metrics.samples);
    Ok(Status::Success)
}

pub fn ablate(global: &Global, args: &DataArgs) -> Result<Status> {
    let run = run_config(global)?;
    let (manifest, files) = args.load()?;
    let rows = run_ablation(&manifest, &files, &run);
    let mut table = String::from(uotalign::trainer::AblationRow::CSV_HEADER);
    table.push('\n');
    for row in &rows {
        table.push_str(&row.csv_line());
        table.push('\n');
    }
    ensure_dir(&global.out)?;
    fs::write(global.out.join("ablation.csv"), &table)?;
    write_json(&global.out.join("ablation.json"), &rows)?;
    print!("{table}");
    let failed: Vec<&str> = rows.iter().filter(|r| r.error.is_some()).map(|r| r.variant.name()).collect();
    if !failed.is_empty() {
        bail!("variants failed: {}", failed.join(", "));
    }
    Ok(Status::Success)
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated ρ₁ values; `inf` allowed.
    #[arg(long)]
    pub rho1: String,
    /// Comma-separated ρ₂ values; `inf` allowed.
    #[arg(long)]
    pub rho2: String,
}

#[derive(Serialize)]
struct SweepRow {
    rho1: serde_json::Value,
    rho2: serde_json::Value,
    final_loss: Option<f64>,
    train_accuracy: Option<f64>,
    /// Validation split, or test when the dataset has no validation split.
    held_out_accuracy: Option<f64>,
    error: Option<String>,
}

fn sweep_point(
    manifest: &DatasetManifest,
    files: &[DescriptionFile],
    run: &RunConfig,
    row: &mut SweepRow,
) -> Result<()> {
    let state = train_prompts(manifest, files, run)?;
    let classes = run.train.classes.as_deref();
    row.final_loss = state.history.last().map(|r| r.loss);
    row.train_accuracy = Some(evaluate(manifest, Split::Train, &state, classes)?.accuracy);
    let held_out = [Split::Val, Split::Test].into_iter().find(|&s| !manifest.split(s).is_empty());
    if let Some(split) = held_out {
        row.held_out_accuracy = Some(evaluate(manifest, split, &state, classes)?.accuracy);
    }
    Ok(())
}

pub fn sweep(global: &Global, args: &SweepArgs) -> Result<Status> {
    let base = run_config(global)?;
    let rho1 = parse_list(&args.rho1, parse_rho)?;
    let rho2 = parse_list(&args.rho2, parse_rho)?;
    if rho1.is_empty() || rho2.is_empty() {
        bail!("both --rho1 and --rho2 need at least one value");
    }
    let (manifest, files) = args.data.load()?;
    let mut rows = Vec::new();
    let mut table = String::from("rho1,rho2,final_loss,train_accuracy,held_out_accuracy,error\n");
    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
    for &r1 in &rho1 {
        for &r2 in &rho2 {
            let mut run = base.clone();
            run.classifier.rho1 = r1;
            run.classifier.rho2 = r2;
            let mut row = SweepRow {
                rho1: rho_json(r1),
                rho2: rho_json(r2),
                final_loss: None,
                train_accuracy: None,
                held_out_accuracy: None,
                error: None,
            };
            if let Err(e) = sweep_point(&manifest, &files, &run, &mut row) {
                log::error!("rho1 {r1}, rho2 {r2}: {e:#}");
                row.error = Some(format!("{e:#}"));
            }
            table.push_str(&format!(
                "{r1},{r2},{},{},{},{}\n",
                opt(row.final_loss),
                opt(row.train_accuracy),
                opt(row.held_out_accuracy),
                row.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
            rows.push(row);
        }
    }
    ensure_dir(&global.out)?;
    fs::write(global.out.join("sweep.csv"), &table)?;
    write_json(&global.out.join("sweep.json"), &rows)?;
    print!("{table}");
    if rows.iter().all(|r| r.error.is_some()) {
        bail!("every sweep point failed");
    }
    Ok(Status::Success)
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest holding the sample.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub sample: String,
    /// Class name as stored in the checkpoint.
    #[arg(long)]
    pub class: String,
}

#[derive(Serialize)]
struct PathSummary {
    distance: f64,
    rows: usize,
    cols: usize,
    converged: bool,
    /// Column of largest mass for each prompt row.
    argmax_columns: Vec<usize>,
    row_sums: Vec<f64>,
}

#[derive(Serialize)]
struct HeatmapReport {
    sample: String,
    class: String,
    d_total: f64,
    /// Visual-token indices the columns refer to.
    columns: Vec<usize>,
    class_specific: Option<PathSummary>,
    domain_shared: Option<PathSummary>,
}

pub fn heatmap(global: &Global, args: &HeatmapArgs) -> Result<Status> {
    let manifest = DatasetManifest::load(&args.manifest)
        .with_context(|| format!("cannot load dataset manifest {}", args.manifest.display()))?;
    let state = load_checkpoint(&args.checkpoint)?;
    let fs = manifest.load_sample(manifest.sample(&args.sample)?)?;
    let s = score(&fs, &args.class, &state.bank, &state.encoder, &state.classifier, &state.solver)?;

    ensure_dir(&global.out)?;
    let mut summaries = Vec::new();
    let mut status = Status::Success;
    for (path, stem) in [(AlignPath::ClassSpecific, "heatmap_cs"), (AlignPath::DomainShared, "heatmap_ds")] {
        let summary = match s.path(path) {
            Some(p) => {
                let w = &p.plan.coupling;
                write_csv(&global.out.join(format!("{stem}.csv")), w)?;
                if !p.plan.converged {
                    status = Status::NotConverged;
                }
                let argmax_columns = (0..w.rows())
                    .map(|i| {
                        w.row(i)
                            .iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |b, (j, &x)| if x > b.1 { (j, x) } else { b })
                            .0
                    })
                    .collect();
                Some(PathSummary {
                    distance: p.distance,
                    rows: w.rows(),
                    cols: w.cols(),
                    converged: p.plan.converged,
                    argmax_columns,
                    row_sums: w.row_sums(),
                })
            }
            None => None,
        };
        summaries.push(summary);
    }
    let domain_shared = summaries.pop().flatten();
    let class_specific = summaries.pop().flatten();
    let report = HeatmapReport {
        sample: args.sample.clone(),
        class: args.class.clone(),
        d_total: s.d_total,
        columns: s.columns.clone(),
        class_specific,
        domain_shared,
    };
    write_json(&global.out.join("heatmap.json"), &report)?;
    if status == Status::NotConverged {
        eprintln!("heatmap: a transport plan hit the iteration cap");
    }
    Ok(status)
}
