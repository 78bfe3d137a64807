//! Entropic optimal transport and entropic unbalanced optimal transport.
//!
//! Both problems are solved by the generalized matrix-scaling iteration on
//! the dual potentials `(u, v)`:
//!
//! ```text
//! uᵏ⁺¹ = [uᵏ/λ + log n − log (W(uᵏ, vᵏ) 1)]   · λρ₁/(λ+ρ₁)
//! vᵏ⁺¹ = [vᵏ/λ + log m − log (W(uᵏ⁺¹, vᵏ)ᵀ 1)] · λρ₂/(λ+ρ₂)
//! ```
//!
//! with `Wᵢⱼ(u, v) = exp((uᵢ + vⱼ − Cᵢⱼ)/λ)`. A marginal weight of
//! [`INF`] turns the corresponding KL penalty into a hard constraint and the
//! factor into its limit `λ`, which recovers balanced Sinkhorn. All row and
//! column sums are taken in the log domain, so `C/λ` in the hundreds is fine.
//!
//! # Objective
//!
//! The reported primal value is
//! `⟨W, C⟩ − λH(W) + ρ₁ KL(W1 ‖ n) + ρ₂ KL(Wᵀ1 ‖ m)` with
//! `H(W) = −Σ wᵢⱼ log wᵢⱼ`. A KL term with infinite weight is a constraint
//! and contributes nothing. When both weights are finite the total mass is a
//! free variable and the entropy of the unnormalized coupling,
//! `H(W) + 1ᵀW`, is used instead: this is the objective whose stationary
//! point is the fixed point of the iteration above, and whose dual is
//! [`dual_value`]. Whenever one side is constrained `1ᵀW` is fixed and the
//! two forms differ by a constant, so the plain entropy is reported.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{entropy, generalized_kl, max_abs, Mat};

/// Marginal weight meaning "hard constraint".
pub const INF: f64 = f64::INFINITY;

/// Serde adapter writing [`INF`] as the string `"inf"` and accepting either
/// a number or `"inf"`/`"infinity"` on input.
pub mod serde_rho {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rho: &f64, s: S) -> Result<S::Ok, S::Error> {
        if rho.is_infinite() && *rho > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*rho)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(x) => Ok(x),
            Repr::Text(t) if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity") => Ok(f64::INFINITY),
            Repr::Text(t) => Err(de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

/// L1 tolerance for hard marginal constraints.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Smallest row/column mass the iteration will take a log of.
const MASS_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop once both `‖uᵏ⁺¹ − uᵏ‖∞` and `‖vᵏ⁺¹ − vᵏ‖∞` fall below this.
    pub dual_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iterations: 2000, dual_tolerance: 1e-9 }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if !(self.dual_tolerance > 0.0) {
            return Err(Error::InvalidArgument("dual_tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Cost matrix, marginals and regularization of one transport instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    pub cost: Mat,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub lambda: f64,
    pub rho1: f64,
    pub rho2: f64,
}

impl TransportProblem {
    pub fn new(cost: Mat, source: Vec<f64>, target: Vec<f64>, lambda: f64, rho1: f64, rho2: f64) -> Result<Self> {
        if cost.rows() != source.len() || cost.cols() != target.len() || source.is_empty() || target.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "cost {}x{} with marginals of length {} and {}",
                cost.rows(),
                cost.cols(),
                source.len(),
                target.len()
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
        }
        for (name, rho) in [("rho1", rho1), ("rho2", rho2)] {
            if !(rho > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive or INF, got {rho}")));
            }
        }
        for (side, marginal) in [("source", &source), ("target", &target)] {
            if marginal.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("marginal"));
            }
            if let Some(index) = marginal.iter().position(|&x| x <= 0.0) {
                return Err(Error::ZeroMarginalMass { side, index });
            }
        }
        Ok(Self { cost, source, target, lambda, rho1, rho2 })
    }

    /// Uniform marginals on both sides, each of total mass one.
    pub fn uniform(cost: Mat, lambda: f64, rho1: f64, rho2: f64) -> Result<Self> {
        let (r, c) = cost.shape();
        Self::new(cost, vec![1.0 / r as f64; r], vec![1.0 / c as f64; c], lambda, rho1, rho2)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.cost.shape()
    }

    pub fn is_balanced(&self) -> bool {
        self.rho1.is_infinite() && self.rho2.is_infinite()
    }

    /// True when at least one marginal is a hard constraint.
    pub fn mass_is_fixed(&self) -> bool {
        self.rho1.is_infinite() || self.rho2.is_infinite()
    }

    /// The same problem with the roles of source and target exchanged.
    pub fn transposed(&self) -> Self {
        Self {
            cost: self.cost.transpose(),
            source: self.target.clone(),
            target: self.source.clone(),
            lambda: self.lambda,
            rho1: self.rho2,
            rho2: self.rho1,
        }
    }

    fn same_structure(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self.lambda == other.lambda
            && self.rho1 == other.rho1
            && self.rho2 == other.rho2
    }
}

/// Solver output: recovered coupling, dual potentials and convergence data.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub coupling: Mat,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub primal_value: f64,
    /// Set when a row or column mass had to be floored before taking its log.
    pub clamped: bool,
}

impl TransportPlan {
    pub fn transported_cost(&self, cost: &Mat) -> Result<f64> {
        self.coupling.frobenius_dot(cost)
    }
}

fn update_factor(lambda: f64, rho: f64) -> f64 {
    if rho.is_infinite() {
        lambda
    } else {
        lambda * rho / (lambda + rho)
    }
}

/// Iteration state of a single instance.
#[derive(Clone, Debug)]
struct ScalingState {
    u: Vec<f64>,
    v: Vec<f64>,
    scratch: Vec<f64>,
    iterations: usize,
    converged: bool,
    clamped: bool,
}

impl ScalingState {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            u: vec![0.0; rows],
            v: vec![0.0; cols],
            scratch: vec![0.0; rows.max(cols)],
            iterations: 0,
            converged: false,
            clamped: false,
        }
    }

    /// One pass of both dual updates.
    fn step(&mut self, p: &TransportProblem, tolerance: f64) -> Result<()> {
        let (rows, cols) = p.shape();
        let lambda = p.lambda;
        let a1 = update_factor(lambda, p.rho1);
        let a2 = update_factor(lambda, p.rho2);
        let floor = MASS_FLOOR.ln();

        let mut du = 0.0f64;
        for i in 0..rows {
            let ui = self.u[i];
            let crow = p.cost.row(i);
            let buf = &mut self.scratch[..cols];
            for ((b, &vj), &cij) in buf.iter_mut().zip(&self.v).zip(crow) {
                *b = (ui + vj - cij) / lambda;
            }
            let mut log_mass = lse(buf);
            if log_mass < floor {
                log_mass = floor;
                self.clamped = true;
            }
            let next = (ui / lambda + p.source[i].ln() - log_mass) * a1;
            if !next.is_finite() {
                return Err(Error::NumericalBlowup { iteration: self.iterations + 1 });
            }
            du = du.max((next - ui).abs());
            self.u[i] = next;
        }

        let mut dv = 0.0f64;
        for j in 0..cols {
            let vj = self.v[j];
            let buf = &mut self.scratch[..rows];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = (self.u[i] + vj - p.cost[(i, j)]) / lambda;
            }
            let mut log_mass = lse(buf);
            if log_mass < floor {
                log_mass = floor;
                self.clamped = true;
            }
            let next = (vj / lambda + p.target[j].ln() - log_mass) * a2;
            if !next.is_finite() {
                return Err(Error::NumericalBlowup { iteration: self.iterations + 1 });
            }
            dv = dv.max((next - vj).abs());
            self.v[j] = next;
        }

        self.iterations += 1;
        self.converged = du < tolerance && dv < tolerance;
        Ok(())
    }

    fn finish(self, p: &TransportProblem) -> Result<TransportPlan> {
        let coupling = recover_coupling(&self.u, &self.v, &p.cost, p.lambda)?;
        let primal_value = objective(&coupling, p)?;
        if !primal_value.is_finite() {
            return Err(Error::NumericalBlowup { iteration: self.iterations });
        }
        Ok(TransportPlan {
            coupling,
            u: self.u,
            v: self.v,
            iterations: self.iterations,
            converged: self.converged,
            primal_value,
            clamped: self.clamped,
        })
    }
}

/// Max-shifted log-sum-exp over a nonempty buffer.
fn lse(buf: &[f64]) -> f64 {
    let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + buf.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Solves entropic UOT with the generalized scaling iteration from `u = v = 0`.
pub fn solve_uot(p: &TransportProblem, cfg: &SolverConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (rows, cols) = p.shape();
    let mut state = ScalingState::new(rows, cols);
    while state.iterations < cfg.max_iterations {
        state.step(p, cfg.dual_tolerance)?;
        if state.converged {
            break;
        }
    }
    state.finish(p)
}

/// Balanced entropic OT: the `ρ₁ = ρ₂ = INF` case of [`solve_uot`].
pub fn solve_entropic_ot(
    cost: &Mat,
    source: &[f64],
    target: &[f64],
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<TransportPlan> {
    let source_mass: f64 = source.iter().sum();
    let target_mass: f64 = target.iter().sum();
    if (source_mass - target_mass).abs() > 1e-9 {
        return Err(Error::MarginalMassMismatch { source_mass, target_mass });
    }
    let p = TransportProblem::new(cost.clone(), source.to_vec(), target.to_vec(), lambda, INF, INF)?;
    solve_uot(&p, cfg)
}

/// Solves several instances sharing shape and regularization.
///
/// Instances advance in lockstep; each one is frozen as soon as it converges
/// or fails, so every result equals an independent [`solve_uot`] call.
/// Chunks of the batch run on separate rayon workers.
pub fn solve_uot_batch(problems: &[TransportProblem], cfg: &SolverConfig) -> Result<Vec<Result<TransportPlan>>> {
    cfg.validate()?;
    let Some(first) = problems.first() else {
        return Ok(Vec::new());
    };
    if let Some(k) = problems.iter().position(|p| !first.same_structure(p)) {
        return Err(Error::InvalidArgument(format!(
            "batch instance {k} differs in shape or regularization from instance 0"
        )));
    }
    let workers = rayon::current_num_threads().max(1);
    let chunk = problems.len().div_ceil(workers).max(1);
    let results = problems.par_chunks(chunk).flat_map_iter(|chunk| solve_lockstep(chunk, cfg)).collect();
    Ok(results)
}

fn solve_lockstep(problems: &[TransportProblem], cfg: &SolverConfig) -> Vec<Result<TransportPlan>> {
    let (rows, cols) = problems[0].shape();
    let mut states: Vec<Result<ScalingState>> = problems.iter().map(|_| Ok(ScalingState::new(rows, cols))).collect();
    for _ in 0..cfg.max_iterations {
        let mut active = 0;
        for (state, p) in states.iter_mut().zip(problems) {
            let Ok(s) = state else { continue };
            if s.converged {
                continue;
            }
            if let Err(e) = s.step(p, cfg.dual_tolerance) {
                *state = Err(e);
                continue;
            }
            active += usize::from(!s.converged);
        }
        if active == 0 {
            break;
        }
    }
    states.into_iter().zip(problems).map(|(state, p)| state.and_then(|s| s.finish(p))).collect()
}

/// `Wᵢⱼ = exp((uᵢ + vⱼ − Cᵢⱼ)/λ)`, evaluated in the log domain.
pub fn recover_coupling(u: &[f64], v: &[f64], cost: &Mat, lambda: f64) -> Result<Mat> {
    if cost.rows() != u.len() || cost.cols() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "duals of length {} and {} for a {}x{} cost",
            u.len(),
            v.len(),
            cost.rows(),
            cost.cols()
        )));
    }
    let mut data = Vec::with_capacity(u.len() * v.len());
    for (i, ui) in u.iter().enumerate() {
        for (vj, cij) in v.iter().zip(cost.row(i)) {
            let w = ((ui + vj - cij) / lambda).exp();
            if !w.is_finite() {
                return Err(Error::NumericalBlowup { iteration: 0 });
            }
            data.push(w);
        }
    }
    Mat::new(u.len(), v.len(), data)
}

fn l1_residual(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Objective without feasibility checks; see the module docs.
fn objective(w: &Mat, p: &TransportProblem) -> Result<f64> {
    let mut value = w.frobenius_dot(&p.cost)? - p.lambda * entropy(w)?;
    if !p.mass_is_fixed() {
        value -= p.lambda * w.sum();
    }
    if p.rho1.is_finite() {
        value += p.rho1 * generalized_kl(&w.row_sums(), &p.source)?;
    }
    if p.rho2.is_finite() {
        value += p.rho2 * generalized_kl(&w.col_sums(), &p.target)?;
    }
    Ok(value)
}

/// Primal objective at `w`. An infinite marginal weight is checked as a hard
/// constraint with L1 tolerance [`FEASIBILITY_TOL`].
pub fn uot_primal_value(w: &Mat, p: &TransportProblem) -> Result<f64> {
    if w.shape() != p.shape() {
        return Err(Error::ShapeMismatch("coupling and cost differ in shape".into()));
    }
    if p.rho1.is_infinite() {
        let residual = l1_residual(&w.row_sums(), &p.source);
        if residual > FEASIBILITY_TOL {
            return Err(Error::MarginalConstraintViolated { side: "source", residual });
        }
    }
    if p.rho2.is_infinite() {
        let residual = l1_residual(&w.col_sums(), &p.target);
        if residual > FEASIBILITY_TOL {
            return Err(Error::MarginalConstraintViolated { side: "target", residual });
        }
    }
    objective(w, p)
}

/// Dual objective
/// `λ Σ exp((uᵢ + vⱼ − Cᵢⱼ)/λ) + ρ₁⟨e^{−u/ρ₁}, n⟩ + ρ₂⟨e^{−v/ρ₂}, m⟩`,
/// minimized by the scaling iteration. A side with infinite weight uses the
/// balanced linear term `−⟨u, n⟩` (resp. `−⟨v, m⟩`).
pub fn dual_value(u: &[f64], v: &[f64], p: &TransportProblem) -> Result<f64> {
    let w = recover_coupling(u, v, &p.cost, p.lambda)?;
    let side = |pot: &[f64], marginal: &[f64], rho: f64| -> f64 {
        if rho.is_infinite() {
            -pot.iter().zip(marginal).map(|(a, b)| a * b).sum::<f64>()
        } else {
            rho * pot.iter().zip(marginal).map(|(a, b)| (-a / rho).exp() * b).sum::<f64>()
        }
    };
    let value = p.lambda * w.sum() + side(u, &p.source, p.rho1) + side(v, &p.target, p.rho2);
    if !value.is_finite() {
        return Err(Error::NumericalBlowup { iteration: 0 });
    }
    Ok(value)
}

/// Gradient of the optimal primal value with respect to the cost matrix,
/// taken at the fixed optimal coupling: it is the coupling itself.
pub fn gradient_wrt_cost(plan: &TransportPlan) -> Result<Mat> {
    if !plan.converged {
        return Err(Error::GradientAtNonOptimum);
    }
    Ok(plan.coupling.clone())
}

/// L1 residuals `(‖W1 − n‖₁, ‖Wᵀ1 − m‖₁)` of a plan against its problem.
pub fn marginal_residuals(plan: &TransportPlan, p: &TransportProblem) -> (f64, f64) {
    (l1_residual(&plan.coupling.row_sums(), &p.source), l1_residual(&plan.coupling.col_sums(), &p.target))
}

/// `‖a − b‖∞` helper used by convergence diagnostics.
pub fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    max_abs(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, r: usize, c: usize, lambda: f64, rho1: f64, rho2: f64) -> TransportProblem {
        let cost = Mat::from_fn(r, c, |_, _| rng.random::<f64>());
        let mut n: Vec<f64> = (0..r).map(|_| 0.2 + rng.random::<f64>()).collect();
        let mut m: Vec<f64> = (0..c).map(|_| 0.2 + rng.random::<f64>()).collect();
        let (sn, sm): (f64, f64) = (n.iter().sum(), m.iter().sum());
        n.iter_mut().for_each(|x| *x /= sn);
        m.iter_mut().for_each(|x| *x /= sm);
        TransportProblem::new(cost, n, m, lambda, rho1, rho2).unwrap()
    }

    #[test]
    fn one_by_one_balanced() {
        let p = TransportProblem::new(Mat::filled(1, 1, 0.5), vec![1.0], vec![1.0], 0.1, INF, INF).unwrap();
        let plan = solve_uot(&p, &SolverConfig::default()).unwrap();
        assert!(plan.converged);
        assert!((plan.coupling[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((plan.transported_cost(&p.cost).unwrap() - 0.5).abs() < 1e-12);
        let g = gradient_wrt_cost(&plan).unwrap();
        assert!((g[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_cost_gives_product_coupling() {
        let p = TransportProblem::uniform(Mat::filled(3, 4, 0.7), 0.05, INF, INF).unwrap();
        let plan = solve_uot(&p, &SolverConfig::default()).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((plan.coupling[(i, j)] - 1.0 / 12.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_lambda_approaches_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_problem(&mut rng, 3, 5, 1000.0, INF, INF);
        let plan = solve_entropic_ot(&p.cost, &p.source, &p.target, 1000.0, &SolverConfig::default()).unwrap();
        let product = Mat::from_fn(3, 5, |i, j| p.source[i] * p.target[j]);
        assert!(plan.coupling.max_abs_diff(&product) < 1e-4);
    }

    #[test]
    fn two_by_two_is_diagonal_dominant() {
        let cost = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let plan = solve_entropic_ot(&cost, &[0.5, 0.5], &[0.5, 0.5], 0.1, &SolverConfig::default()).unwrap();
        assert!(plan.converged);
        assert!(plan.coupling[(0, 0)] > plan.coupling[(0, 1)]);
        assert!(plan.coupling[(1, 1)] > plan.coupling[(1, 0)]);
    }

    #[test]
    fn mass_mismatch_rejected() {
        let err = solve_entropic_ot(&Mat::zeros(1, 2), &[1.0], &[0.3, 0.3], 1.0, &SolverConfig::default()).unwrap_err();
        assert!(err.to_string().contains("marginal mass mismatch"));
    }

    #[test]
    fn zero_marginal_rejected() {
        let err = TransportProblem::new(Mat::zeros(2, 1), vec![1.0, 0.0], vec![1.0], 1.0, INF, INF).unwrap_err();
        assert!(err.to_string().contains("zero marginal mass"));
    }

    #[test]
    fn blowup_is_reported_with_iteration() {
        // −C/λ overflows to +inf on the first row update.
        let p = TransportProblem::new(Mat::filled(1, 1, -1.7e308), vec![2.0], vec![1.0], 0.5, 1.0, 1.0).unwrap();
        match solve_uot(&p, &SolverConfig::default()) {
            Err(Error::NumericalBlowup { iteration }) => assert_eq!(iteration, 1),
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn recover_coupling_examples() {
        let ones = recover_coupling(&[0.0, 0.0], &[0.0; 3], &Mat::zeros(2, 3), 1.0).unwrap();
        assert!(ones.as_slice().iter().all(|&x| x == 1.0));
        let half = recover_coupling(&[0.0], &[0.0, 0.0], &Mat::filled(1, 2, 2f64.ln()), 1.0).unwrap();
        assert!(half.as_slice().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        // Would overflow without the combined exponent.
        let w = recover_coupling(&[5.0], &[-5.0], &Mat::filled(1, 1, 0.0), 0.01).unwrap();
        assert_eq!(w[(0, 0)], 1.0);
    }

    #[test]
    fn primal_value_examples() {
        let p =
            TransportProblem::new(Mat::filled(2, 3, 0.3), vec![0.4, 0.6], vec![0.2, 0.3, 0.5], 0.1, 1.0, 1.0).unwrap();
        let product = Mat::from_fn(2, 3, |i, j| p.source[i] * p.target[j]);
        let expected = product.frobenius_dot(&p.cost).unwrap() - 0.1 * entropy(&product).unwrap() - 0.1 * product.sum();
        assert!((uot_primal_value(&product, &p).unwrap() - expected).abs() < 1e-14);

        let zero = Mat::zeros(2, 3);
        assert!((uot_primal_value(&zero, &p).unwrap() - 2.0).abs() < 1e-14);

        let hard = TransportProblem { rho1: INF, ..p.clone() };
        let err = uot_primal_value(&zero, &hard).unwrap_err();
        assert!(err.to_string().contains("marginal constraint violated"));
    }

    #[test]
    fn dual_value_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_problem(&mut rng, 2, 3, 0.2, 0.5, 2.0);
        let direct: f64 = p.cost.as_slice().iter().map(|c| (-c / 0.2).exp()).sum::<f64>() * 0.2
            + 0.5 * p.source.iter().sum::<f64>()
            + 2.0 * p.target.iter().sum::<f64>();
        assert!((dual_value(&[0.0; 2], &[0.0; 3], &p).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn dual_decreases_over_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (rho1, rho2) in [(INF, INF), (0.5, 1.0), (INF, 0.04), (2.0, INF)] {
            for _ in 0..5 {
                let p = random_problem(&mut rng, 4, 6, 0.05, rho1, rho2);
                let mut state = ScalingState::new(4, 6);
                let mut last = dual_value(&state.u, &state.v, &p).unwrap();
                for _ in 0..200 {
                    state.step(&p, 1e-12).unwrap();
                    let d = dual_value(&state.u, &state.v, &p).unwrap();
                    assert!(d <= last + 1e-9, "dual rose from {last} to {d}");
                    last = d;
                }
            }
        }
    }

    #[test]
    fn strong_duality_at_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = SolverConfig { max_iterations: 100_000, dual_tolerance: 1e-13 };
        for (rho1, rho2) in [(INF, INF), (0.5, 1.0), (INF, 0.5)] {
            let p = random_problem(&mut rng, 2, 2, 0.1, rho1, rho2);
            let plan = solve_uot(&p, &cfg).unwrap();
            let dual = dual_value(&plan.u, &plan.v, &p).unwrap();
            let mass_terms = [(p.rho1, &p.source), (p.rho2, &p.target)]
                .iter()
                .filter(|(rho, _)| rho.is_finite())
                .map(|(rho, z)| rho * z.iter().sum::<f64>())
                .sum::<f64>();
            let fixed_mass = if p.mass_is_fixed() { p.lambda * p.source.iter().sum::<f64>() } else { 0.0 };
            assert!((plan.primal_value - (mass_terms + fixed_mass - dual)).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_requires_convergence() {
        let p = TransportProblem::uniform(Mat::filled(2, 2, 0.1), 0.1, INF, INF).unwrap();
        let mut plan = solve_uot(&p, &SolverConfig::default()).unwrap();
        plan.converged = false;
        assert!(matches!(gradient_wrt_cost(&plan), Err(Error::GradientAtNonOptimum)));
    }

    #[test]
    fn batch_matches_independent_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let problems: Vec<_> = (0..8).map(|_| random_problem(&mut rng, 4, 49, 0.05, INF, 0.04)).collect();
        let cfg = SolverConfig::default();
        let batch = solve_uot_batch(&problems, &cfg).unwrap();
        for (p, b) in problems.iter().zip(batch) {
            let b = b.unwrap();
            let single = solve_uot(p, &cfg).unwrap();
            assert!(sup_distance(&b.u, &single.u) <= 1e-12);
            assert!(sup_distance(&b.v, &single.v) <= 1e-12);
            assert_eq!(b.iterations, single.iterations);
        }

        let same = vec![problems[0].clone(); 3];
        let plans: Vec<_> = solve_uot_batch(&same, &cfg).unwrap().into_iter().map(Result::unwrap).collect();
        assert!(plans.windows(2).all(|w| w[0] == w[1]));
        let one = solve_uot_batch(&problems[..1], &cfg).unwrap().pop().unwrap().unwrap();
        assert_eq!(one, solve_uot(&problems[0], &cfg).unwrap());
    }

    #[test]
    fn batch_rejects_mixed_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_problem(&mut rng, 2, 3, 0.1, INF, INF);
        let b = random_problem(&mut rng, 2, 3, 0.2, INF, INF);
        assert!(solve_uot_batch(&[a, b], &SolverConfig::default()).is_err());
    }

    #[test]
    fn batch_keeps_failed_instances_isolated() {
        let good = TransportProblem::new(Mat::filled(1, 2, 0.0), vec![1.0], vec![0.5, 0.5], 0.5, INF, INF).unwrap();
        // (u + v − C)/λ overflows to +inf on the first update.
        let bad = TransportProblem { cost: Mat::new(1, 2, vec![-1.7e308, 0.0]).unwrap(), ..good.clone() };
        let out = solve_uot_batch(&[bad, good.clone()], &SolverConfig::default()).unwrap();
        assert!(matches!(out[0], Err(Error::NumericalBlowup { iteration: 1 })));
        assert_eq!(out[1].as_ref().unwrap(), &solve_uot(&good, &SolverConfig::default()).unwrap());
    }
}
