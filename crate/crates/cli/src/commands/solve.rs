use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use log::info;
use serde::Serialize;
use uotalign::outlier::{compare as compare_plans, OutlierSpec};
use uotalign::transport::{dual_value, marginal_residuals, solve_uot, TransportPlan, TransportProblem};
use uotalign::SolverConfig;

use super::{run_config, Status};
use crate::io::{ensure_dir, parse_list, parse_rho, read_matrix, rho_json, write_csv, write_json, write_matrix_pair};
use crate::Global;

#[derive(Args, Debug)]
pub struct SolveArgs {
    /// Cost matrix as EMB1 or headerless CSV.
    #[arg(long)]
    pub cost: PathBuf,
    /// Comma-separated source marginal; uniform with mass one by default.
    #[arg(long)]
    pub source: Option<String>,
    /// Comma-separated target marginal; uniform with mass one by default.
    #[arg(long)]
    pub target: Option<String>,
    /// Entropy weight; defaults to the classifier's.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Source marginal weight, a number or `inf`.
    #[arg(long, value_parser = parse_rho)]
    pub rho1: Option<f64>,
    /// Target marginal weight, a number or `inf`.
    #[arg(long, value_parser = parse_rho)]
    pub rho2: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Comma-separated column indices whose share of the mass is reported.
    #[arg(long)]
    pub outlier_columns: Option<String>,
}

#[derive(Serialize)]
struct SolveReport {
    rows: usize,
    cols: usize,
    lambda: f64,
    rho1: serde_json::Value,
    rho2: serde_json::Value,
    iterations: usize,
    converged: bool,
    clamped: bool,
    primal_value: f64,
    dual_value: Option<f64>,
    transported_cost: f64,
    total_mass: f64,
    source_residual_l1: f64,
    target_residual_l1: f64,
    u: Vec<f64>,
    v: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outlier_mass: Option<f64>,
}

fn solver_config(base: SolverConfig, max_iterations: Option<usize>, tolerance: Option<f64>) -> SolverConfig {
    SolverConfig {
        max_iterations: max_iterations.unwrap_or(base.max_iterations),
        dual_tolerance: tolerance.unwrap_or(base.dual_tolerance),
    }
}

fn marginal(arg: &Option<String>, len: usize, side: &str) -> Result<Vec<f64>> {
    match arg {
        None => Ok(vec![1.0 / len as f64; len]),
        Some(s) => {
            let v = parse_list(s, |t| t.parse::<f64>())?;
            if v.len() != len {
                bail!("{side} marginal has {} entries, cost needs {len}", v.len());
            }
            Ok(v)
        }
    }
}

fn report(plan: &TransportPlan, p: &TransportProblem, outliers: Option<&[usize]>) -> Result<SolveReport> {
    let (source_residual_l1, target_residual_l1) = marginal_residuals(plan, p);
    let total_mass = plan.coupling.sum();
    let outlier_mass = outliers.map(|cols| {
        let sums = plan.coupling.col_sums();
        cols.iter().map(|&j| sums[j]).sum::<f64>() / total_mass
    });
    Ok(SolveReport {
        rows: p.cost.rows(),
        cols: p.cost.cols(),
        lambda: p.lambda,
        rho1: rho_json(p.rho1),
        rho2: rho_json(p.rho2),
        iterations: plan.iterations,
        converged: plan.converged,
        clamped: plan.clamped,
        primal_value: plan.primal_value,
        dual_value: dual_value(&plan.u, &plan.v, p).ok(),
        transported_cost: plan.transported_cost(&p.cost)?,
        total_mass,
        source_residual_l1,
        target_residual_l1,
        u: plan.u.clone(),
        v: plan.v.clone(),
        outlier_mass,
    })
}

fn convergence_status(plans: &[(&str, &TransportPlan)]) -> Status {
    let mut status = Status::Success;
    for (name, plan) in plans {
        if !plan.converged {
            eprintln!("{name}: max iterations ({}) reached before the duals settled", plan.iterations);
            status = Status::NotConverged;
        }
    }
    status
}

pub fn solve(global: &Global, args: &SolveArgs) -> Result<Status> {
    let run = run_config(global)?;
    let cost = read_matrix(&args.cost)?;
    let (rows, cols) = cost.shape();
    let source = marginal(&args.source, rows, "source")?;
    let target = marginal(&args.target, cols, "target")?;
    let outliers = args.outlier_columns.as_deref().map(|s| parse_list(s, |t| t.parse::<usize>())).transpose()?;
    if let Some(j) = outliers.iter().flatten().find(|&&j| j >= cols) {
        bail!("outlier column {j} out of range for {cols} columns");
    }
    let problem = TransportProblem::new(
        cost,
        source,
        target,
        args.lambda.unwrap_or(run.classifier.lambda),
        args.rho1.unwrap_or(run.classifier.rho1),
        args.rho2.unwrap_or(run.classifier.rho2),
    )?;
    let solver = solver_config(run.solver, args.max_iterations, args.tolerance);
    let plan = solve_uot(&problem, &solver)?;
    let summary = report(&plan, &problem, outliers.as_deref())?;

    ensure_dir(&global.out)?;
    write_matrix_pair(&global.out, "coupling", &plan.coupling)?;
    write_json(&global.out.join("solve.json"), &summary)?;
    info!("solved {rows}x{cols} in {} iterations, primal {}", plan.iterations, plan.primal_value);
    Ok(convergence_status(&[("solve", &plan)]))
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Strict JSON instance spec; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub matches: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub match_noise: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_parser = parse_rho)]
    pub rho1: Option<f64>,
    #[arg(long, value_parser = parse_rho)]
    pub rho2: Option<f64>,
}

#[derive(Serialize)]
struct CompareReport {
    spec: OutlierSpec,
    outlier_columns: Vec<usize>,
    ot_outlier_mass: f64,
    uot_outlier_mass: f64,
    ot: SolveReport,
    uot: SolveReport,
}

pub fn compare(global: &Global, args: &CompareArgs) -> Result<Status> {
    let run = run_config(global)?;
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid instance spec {}", path.display()))?
        }
        None => OutlierSpec::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { spec.$field = v; })* };
    }
    set!(prompts, images, matches, dim, match_noise, lambda, rho1, rho2);
    if let Some(seed) = global.seed {
        spec.seed = seed;
    }

    let c = compare_plans(&spec, &run.solver)?;
    let (ot_mass, uot_mass) = (c.ot_outlier_mass(), c.uot_outlier_mass());
    let ot_problem = c.instance.problem(spec.lambda, f64::INFINITY, f64::INFINITY)?;
    let uot_problem = c.instance.problem(spec.lambda, spec.rho1, spec.rho2)?;
    let summary = CompareReport {
        spec: spec.clone(),
        outlier_columns: c.instance.outlier_columns.clone(),
        ot_outlier_mass: ot_mass,
        uot_outlier_mass: uot_mass,
        ot: report(&c.ot, &ot_problem, Some(&c.instance.outlier_columns))?,
        uot: report(&c.uot, &uot_problem, Some(&c.instance.outlier_columns))?,
    };

    ensure_dir(&global.out)?;
    write_csv(&global.out.join("ot_coupling.csv"), &c.ot.coupling)?;
    write_csv(&global.out.join("uot_coupling.csv"), &c.uot.coupling)?;
    write_csv(&global.out.join("cost.csv"), &c.instance.cost)?;
    write_json(&global.out.join("compare.json"), &summary)?;
    println!("outlier mass: OT {ot_mass:.6}, UOT {uot_mass:.6}");

    if !c.instance.outlier_columns.is_empty() && uot_mass >= ot_mass {
        bail!("UOT outlier mass {uot_mass} is not below OT outlier mass {ot_mass}");
    }
    Ok(convergence_status(&[("ot", &c.ot), ("uot", &c.uot)]))
}
