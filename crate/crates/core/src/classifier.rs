//! Transport-based class scores. A sample's local embeddings are aligned
//! with each class's prompt embeddings along two paths, class-specific and
//! domain-shared; the weighted sum of the two transport distances gives the
//! class distance `dⁱ`, and `softmax((1 − dⁱ)/τ)` the class likelihood.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::numerics::{cosine_matrix, dot, norm2, softmax, Mat};
use crate::prompt::{ClassEmbeddings, FrozenEncoder, PromptBank};
use crate::transport::{serde_rho, solve_uot_batch, SolverConfig, TransportPlan, TransportProblem, INF};

/// Which scalar of a transport solution is used as the path distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Regularized optimum `V(C) − V(0)`: the full objective at the optimal
    /// plan, minus the same quantity for an all-zero cost with identical
    /// marginals. Nonnegative for nonnegative costs, zero when `C ≡ 0`, and
    /// its gradient with respect to `C` is exactly the optimal plan.
    RelativeObjective,
    /// `⟨W*, C⟩`. The optimal plan is then only an approximate gradient.
    TransportedCost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub tau: f64,
    pub gamma_cs: f64,
    pub gamma_ds: f64,
    pub lambda: f64,
    #[serde(with = "serde_rho")]
    pub rho1: f64,
    #[serde(with = "serde_rho")]
    pub rho2: f64,
    /// False solves balanced OT on both paths.
    pub use_uot: bool,
    pub distance: Distance,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            gamma_cs: 0.5,
            gamma_ds: 0.5,
            lambda: 0.01,
            rho1: INF,
            rho2: 0.04,
            use_uot: true,
            distance: Distance::RelativeObjective,
        }
    }
}

impl ClassifierConfig {
    /// A path with zero weight is disabled and never solved.
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, g) in [("gamma_cs", self.gamma_cs), ("gamma_ds", self.gamma_ds)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be nonnegative, got {g}")));
            }
        }
        if self.gamma_cs == 0.0 && self.gamma_ds == 0.0 {
            return Err(Error::InvalidArgument("at least one of gamma_cs, gamma_ds must be positive".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", self.lambda)));
        }
        for (name, rho) in [("rho1", self.rho1), ("rho2", self.rho2)] {
            if !(rho > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive or inf, got {rho}")));
            }
        }
        Ok(())
    }

    /// `(ρ₁, ρ₂)` actually handed to the solver.
    pub fn marginal_weights(&self) -> (f64, f64) {
        if self.use_uot {
            (self.rho1, self.rho2)
        } else {
            (INF, INF)
        }
    }

    pub fn gamma(&self, path: Path) -> f64 {
        match path {
            Path::ClassSpecific => self.gamma_cs,
            Path::DomainShared => self.gamma_ds,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    ClassSpecific,
    DomainShared,
}

impl Path {
    pub const BOTH: [Path; 2] = [Path::ClassSpecific, Path::DomainShared];

    pub fn prompts(self, e: &ClassEmbeddings) -> &Mat {
        match self {
            Path::ClassSpecific => &e.cs,
            Path::DomainShared => &e.ds,
        }
    }
}

/// `P × M` matrix of `1 − cos(Gₖ, Fₘ)`; rows are prompts, columns visual tokens.
pub fn cost_matrix(f: &Mat, g: &Mat) -> Result<Mat> {
    let off_unit = |m: &Mat| (0..m.rows()).any(|i| (norm2(m.row(i)) - 1.0).abs() > 1e-6);
    if off_unit(f) || off_unit(g) {
        warn!("cost_matrix: rows are not unit-norm; cosines are normalized explicitly");
    }
    Ok(cosine_matrix(g, f)?.map(|c| 1.0 - c))
}

/// Gradient with respect to `g` of `⟨d_cost, cost_matrix(f, g)⟩`.
pub fn cost_matrix_backward(f: &Mat, g: &Mat, d_cost: &Mat) -> Result<Mat> {
    if d_cost.shape() != (g.rows(), f.rows()) || f.cols() != g.cols() {
        return Err(Error::ShapeMismatch("cost gradient does not match prompts × tokens".into()));
    }
    let mut out = Mat::zeros(g.rows(), g.cols());
    for m in 0..f.rows() {
        if norm2(f.row(m)) == 0.0 {
            return Err(Error::DegenerateEmbedding { row: m });
        }
    }
    for k in 0..g.rows() {
        let gk = g.row(k);
        let ng = norm2(gk);
        if ng == 0.0 {
            return Err(Error::DegenerateEmbedding { row: k });
        }
        let row = out.row_mut(k);
        for m in 0..f.rows() {
            let fm = f.row(m);
            let nf = norm2(fm);
            let cos = dot(gk, fm) / (ng * nf);
            let w = d_cost[(k, m)];
            // ∂(1 − cos)/∂gₖ = −(f̂ − cos·ĝ)/‖gₖ‖.
            for ((o, &x), &y) in row.iter_mut().zip(fm).zip(gk) {
                *o -= w * (x / nf - cos * y / ng) / ng;
            }
        }
    }
    Ok(out)
}

/// One solved path of one (sample, class) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PathScore {
    pub distance: f64,
    /// Over the active (positive-weight) columns only.
    pub cost: Mat,
    pub plan: TransportPlan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentScore {
    pub d_cs: f64,
    pub d_ds: f64,
    pub d_total: f64,
    pub cs: Option<PathScore>,
    pub ds: Option<PathScore>,
    /// Visual tokens that carry mass; the columns of every cost and plan.
    pub columns: Vec<usize>,
}

impl AlignmentScore {
    pub fn path(&self, path: Path) -> Option<&PathScore> {
        match path {
            Path::ClassSpecific => self.cs.as_ref(),
            Path::DomainShared => self.ds.as_ref(),
        }
    }

    /// Plans that stopped at the iteration cap.
    pub fn unconverged(&self) -> usize {
        [&self.cs, &self.ds].iter().filter_map(|p| p.as_ref()).filter(|p| !p.plan.converged).count()
    }
}

/// Active columns of `fs` and the matching rows, weights.
fn active(fs: &FeatureSet) -> Result<(Vec<usize>, Mat, Vec<f64>)> {
    let columns: Vec<usize> = (0..fs.len()).filter(|&j| fs.weights[j] > 0.0).collect();
    if columns.is_empty() {
        return Err(Error::InvalidArgument(format!("sample {:?} has no positive weights", fs.sample_id)));
    }
    let rows: Vec<Vec<f64>> = columns.iter().map(|&j| fs.features.row(j).to_vec()).collect();
    let weights = columns.iter().map(|&j| fs.weights[j]).collect();
    Ok((columns, Mat::from_rows(&rows)?, weights))
}

enum Job {
    Pair { sample: usize, class: usize, path: Path },
    Baseline { sample: usize, rows: usize },
}

/// Scores every sample against every class. `embeddings[i]` belongs to
/// `class_names[i]`. All transport problems of the call are grouped by shape
/// and solved with [`solve_uot_batch`]; results do not depend on the thread
/// count.
pub fn score_all(
    samples: &[&FeatureSet],
    class_names: &[&str],
    embeddings: &[ClassEmbeddings],
    cfg: &ClassifierConfig,
    solver: &SolverConfig,
) -> Result<Vec<Vec<AlignmentScore>>> {
    cfg.validate()?;
    if class_names.len() != embeddings.len() || embeddings.is_empty() {
        return Err(Error::ShapeMismatch("one embedding set per class is required".into()));
    }
    let (rho1, rho2) = cfg.marginal_weights();
    let paths: Vec<Path> = Path::BOTH.into_iter().filter(|&p| cfg.gamma(p) > 0.0).collect();

    let mut prepared = Vec::with_capacity(samples.len());
    let mut jobs = Vec::new();
    let mut problems = Vec::new();
    let mut costs = Vec::new();
    let tag = |class: &str, sample: &str, e: Error| Error::Scoring {
        class: class.to_string(),
        sample: sample.to_string(),
        source: Box::new(e),
    };
    for (s, fs) in samples.iter().enumerate() {
        let (columns, f, weights) = active(fs)?;
        for &path in &paths {
            for (c, e) in embeddings.iter().enumerate() {
                let g = path.prompts(e);
                let source = vec![1.0 / g.rows() as f64; g.rows()];
                let cost = cost_matrix(&f, g).map_err(|e| tag(class_names[c], &fs.sample_id, e))?;
                let p = TransportProblem::new(cost.clone(), source, weights.clone(), cfg.lambda, rho1, rho2)
                    .map_err(|e| tag(class_names[c], &fs.sample_id, e))?;
                jobs.push(Job::Pair { sample: s, class: c, path });
                problems.push(p);
                costs.push(cost);
            }
        }
        if cfg.distance == Distance::RelativeObjective {
            let mut prompt_counts: Vec<usize> =
                paths.iter().flat_map(|&path| embeddings.iter().map(move |e| path.prompts(e).rows())).collect();
            prompt_counts.sort_unstable();
            prompt_counts.dedup();
            for rows in prompt_counts {
                let zero = Mat::zeros(rows, columns.len());
                let source = vec![1.0 / rows as f64; rows];
                let p = TransportProblem::new(zero.clone(), source, weights.clone(), cfg.lambda, rho1, rho2)?;
                jobs.push(Job::Baseline { sample: s, rows });
                problems.push(p);
                costs.push(zero);
            }
        }
        prepared.push(columns);
    }

    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (k, p) in problems.iter().enumerate() {
        groups.entry(p.shape()).or_default().push(k);
    }
    let mut plans: Vec<Option<Result<TransportPlan>>> = (0..problems.len()).map(|_| None).collect();
    for indices in groups.values() {
        let group: Vec<TransportProblem> = indices.iter().map(|&k| problems[k].clone()).collect();
        for (k, plan) in indices.iter().zip(solve_uot_batch(&group, solver)?) {
            plans[*k] = Some(plan);
        }
    }

    let mut baselines: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pairs: BTreeMap<(usize, usize, Path), PathScore> = BTreeMap::new();
    for ((job, plan), cost) in jobs.into_iter().zip(plans).zip(costs) {
        let plan = plan.expect("every problem was solved");
        match job {
            Job::Baseline { sample, rows } => {
                let plan = plan.map_err(|e| tag("<zero cost>", &samples[sample].sample_id, e))?;
                baselines.insert((sample, rows), plan.primal_value);
            }
            Job::Pair { sample, class, path } => {
                let plan = plan.map_err(|e| tag(class_names[class], &samples[sample].sample_id, e))?;
                if !plan.converged {
                    warn!(
                        "class {:?}, sample {:?}: transport stopped at {} iterations without converging",
                        class_names[class], samples[sample].sample_id, plan.iterations
                    );
                }
                let distance = match cfg.distance {
                    Distance::RelativeObjective => plan.primal_value,
                    Distance::TransportedCost => plan.transported_cost(&cost)?,
                };
                pairs.insert((sample, class, path), PathScore { distance, cost, plan });
            }
        }
    }

    let mut out = Vec::with_capacity(samples.len());
    for (s, columns) in prepared.into_iter().enumerate() {
        let mut row = Vec::with_capacity(embeddings.len());
        for c in 0..embeddings.len() {
            let mut take = |path: Path| {
                pairs.remove(&(s, c, path)).map(|mut p| {
                    if let Some(v0) = baselines.get(&(s, p.cost.rows())) {
                        p.distance -= v0;
                    }
                    p
                })
            };
            let cs = take(Path::ClassSpecific);
            let ds = take(Path::DomainShared);
            let d_cs = cs.as_ref().map_or(0.0, |p| p.distance);
            let d_ds = ds.as_ref().map_or(0.0, |p| p.distance);
            let d_total = cfg.gamma_cs * d_cs + cfg.gamma_ds * d_ds;
            row.push(AlignmentScore { d_cs, d_ds, d_total, cs, ds, columns: columns.clone() });
        }
        out.push(row);
    }
    Ok(out)
}

/// Scores one sample against the named class of `bank`.
pub fn score(
    fs: &FeatureSet,
    class_id: &str,
    bank: &PromptBank,
    encoder: &FrozenEncoder,
    cfg: &ClassifierConfig,
    solver: &SolverConfig,
) -> Result<AlignmentScore> {
    let e = bank.embeddings(bank.class_index(class_id)?, encoder)?;
    let mut rows = score_all(&[fs], &[class_id], &[e], cfg, solver)?;
    Ok(rows.remove(0).remove(0))
}

/// `P(c = i | x) = softmax((1 − dⁱ)/τ)`.
pub fn likelihood(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let logits: Vec<f64> = scores.iter().map(|d| (1.0 - d) / tau).collect();
    softmax(&logits)
}

/// Smallest probability fed to a logarithm.
pub const PROB_FLOOR: f64 = 1e-300;

/// Mean negative log-likelihood `−(1/B) Σ_b Σ_i y_bi log P_bi`.
pub fn ce_loss(probs: &Mat, labels: &Mat) -> Result<f64> {
    if probs.shape() != labels.shape() || probs.rows() == 0 {
        return Err(Error::ShapeMismatch("probabilities and labels differ in shape".into()));
    }
    let mut total = 0.0;
    for b in 0..probs.rows() {
        for (p, y) in probs.row(b).iter().zip(labels.row(b)) {
            if *y == 0.0 {
                continue;
            }
            if *p < PROB_FLOOR {
                warn!("ce_loss: true-class probability {p:e} clamped to {PROB_FLOOR:e}");
            }
            total -= y * p.max(PROB_FLOOR).ln();
        }
    }
    Ok(total / probs.rows() as f64)
}

/// `B × K` one-hot rows for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Mat> {
    let mut m = Mat::zeros(labels.len(), classes);
    for (b, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::UnknownClass(format!("#{l}")));
        }
        m[(b, l)] = 1.0;
    }
    Ok(m)
}

/// `∂ ce_loss / ∂ dⁱ` for one sample of a batch of `batch` samples.
pub fn ce_grad_wrt_distances(probs: &[f64], label: usize, batch: usize, tau: f64) -> Vec<f64> {
    let scale = 1.0 / (batch as f64 * tau);
    probs.iter().enumerate().map(|(i, p)| -(p - f64::from(u8::from(i == label))) * scale).collect()
}

/// Cosine-softmax baseline: `softmax(cos(tᵢ, f)/τ)`.
pub fn zero_shot_likelihood(f_global: &[f64], class_embeddings: &Mat, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let f = Mat::new(1, f_global.len(), f_global.to_vec())?;
    let cos = cosine_matrix(&f, class_embeddings)?;
    softmax(&cos.row(0).iter().map(|c| c / tau).collect::<Vec<_>>())
}

/// Index of the smallest distance; the first one wins ties.
pub fn predict(scores: &[f64]) -> usize {
    scores.iter().enumerate().fold((0, f64::INFINITY), |best, (i, &d)| if d < best.1 { (i, d) } else { best }).0
}
