//! Brute-force verifiers for the solvers and the hand-written gradients.
//!
//! Nothing here calls into the solver or the numerics kernels: the grid
//! oracle evaluates the transport objective with its own loops.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::rng;
use crate::transport::{TransportProblem, INF};

/// Largest `rows · cols` the grid oracle accepts.
pub const ORACLE_CELL_CAP: usize = 6;

/// Half-width of the zoom window, in grid spacings of the previous round.
const ZOOM_SPACINGS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub mass_upper_bound: f64,
    /// Points per coordinate, endpoints included.
    pub resolution: usize,
    pub refinement_rounds: usize,
}

impl GridSpec {
    /// Resolution 21, four rounds, and twice the larger input mass as bound.
    pub fn for_problem(p: &TransportProblem) -> Self {
        let n: f64 = p.source.iter().sum();
        let m: f64 = p.target.iter().sum();
        Self { mass_upper_bound: 2.0 * n.max(m), resolution: 21, refinement_rounds: 4 }
    }

    /// Like [`GridSpec::for_problem`], but trades resolution for rounds when
    /// more than four coordinates are free, keeping one solve under a second.
    pub fn tractable(p: &TransportProblem) -> Self {
        let spec = Self::for_problem(p);
        if free_dimension(p) > 4 {
            Self { resolution: 9, refinement_rounds: 10, ..spec }
        } else {
            spec
        }
    }
}

/// Number of free coordinates the oracle searches over for `p`.
pub fn free_dimension(p: &TransportProblem) -> usize {
    let (r, c) = p.shape();
    match (p.rho1.is_infinite(), p.rho2.is_infinite()) {
        (false, false) => r * c,
        (true, false) => r * (c - 1),
        (false, true) => (r - 1) * c,
        (true, true) => (r - 1) * (c - 1),
    }
}

/// Which entries of the coupling are free and how the rest are eliminated.
enum Layout {
    /// Every entry is free.
    Free,
    /// Row sums fixed: last entry of each row is eliminated.
    Rows,
    /// Column sums fixed: last entry of each column is eliminated.
    Cols,
    /// Both fixed: top-left `(r−1)×(c−1)` block is free.
    Both,
}

struct Parameterization<'a> {
    p: &'a TransportProblem,
    rows: usize,
    cols: usize,
    layout: Layout,
    /// Flat coupling index of each free coordinate.
    free: Vec<usize>,
    upper: Vec<f64>,
}

impl<'a> Parameterization<'a> {
    fn new(p: &'a TransportProblem, bound: f64) -> Self {
        let (rows, cols) = p.shape();
        let layout = match (p.rho1.is_infinite(), p.rho2.is_infinite()) {
            (false, false) => Layout::Free,
            (true, false) => Layout::Rows,
            (false, true) => Layout::Cols,
            (true, true) => Layout::Both,
        };
        let mut free = Vec::new();
        let mut upper = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                let is_free = match layout {
                    Layout::Free => true,
                    Layout::Rows => j + 1 < cols,
                    Layout::Cols => i + 1 < rows,
                    Layout::Both => i + 1 < rows && j + 1 < cols,
                };
                if is_free {
                    let mut hi = bound;
                    if p.rho1.is_infinite() {
                        hi = hi.min(p.source[i]);
                    }
                    if p.rho2.is_infinite() {
                        hi = hi.min(p.target[j]);
                    }
                    free.push(i * cols + j);
                    upper.push(hi);
                }
            }
        }
        Self { p, rows, cols, layout, free, upper }
    }

    /// Fills `w` from the free coordinates; false if an eliminated entry is negative.
    fn assemble(&self, x: &[f64], w: &mut [f64]) -> bool {
        let (r, c) = (self.rows, self.cols);
        w.iter_mut().for_each(|e| *e = 0.0);
        for (&k, &xk) in self.free.iter().zip(x) {
            w[k] = xk;
        }
        match self.layout {
            Layout::Free => {}
            Layout::Rows => {
                for i in 0..r {
                    let s: f64 = (0..c - 1).map(|j| w[i * c + j]).sum();
                    w[i * c + c - 1] = self.p.source[i] - s;
                }
            }
            Layout::Cols => {
                for j in 0..c {
                    let s: f64 = (0..r - 1).map(|i| w[i * c + j]).sum();
                    w[(r - 1) * c + j] = self.p.target[j] - s;
                }
            }
            Layout::Both => {
                for i in 0..r - 1 {
                    let s: f64 = (0..c - 1).map(|j| w[i * c + j]).sum();
                    w[i * c + c - 1] = self.p.source[i] - s;
                }
                for j in 0..c {
                    let s: f64 = (0..r - 1).map(|i| w[i * c + j]).sum();
                    w[(r - 1) * c + j] = self.p.target[j] - s;
                }
                // The corner was fixed by the column; make sure the last row agrees.
                let last_row: f64 = (0..c).map(|j| w[(r - 1) * c + j]).sum();
                if (last_row - self.p.source[r - 1]).abs() > 1e-9 {
                    return false;
                }
            }
        }
        w.iter().all(|&e| e >= -1e-15)
    }
}

fn kl_term(mass: f64, reference: f64) -> f64 {
    if mass <= 0.0 {
        reference
    } else {
        mass * (mass / reference).ln() - mass + reference
    }
}

/// Transport objective evaluated from scratch on a flat row-major coupling.
fn evaluate(p: &TransportProblem, w: &[f64], rows: usize, cols: usize) -> f64 {
    let lambda = p.lambda;
    let mut value = 0.0;
    let mut row_mass = [0.0; ORACLE_CELL_CAP];
    let mut col_mass = [0.0; ORACLE_CELL_CAP];
    for i in 0..rows {
        for j in 0..cols {
            let x = w[i * cols + j].max(0.0);
            value += x * p.cost.as_slice()[i * cols + j];
            if x > 0.0 {
                value += lambda * x * x.ln();
            }
            row_mass[i] += x;
            col_mass[j] += x;
        }
    }
    if p.rho1.is_finite() && p.rho2.is_finite() {
        value -= lambda * row_mass[..rows].iter().sum::<f64>();
    }
    if p.rho1.is_finite() {
        value += p.rho1 * row_mass[..rows].iter().zip(&p.source).map(|(&a, &b)| kl_term(a, b)).sum::<f64>();
    }
    if p.rho2.is_finite() {
        value += p.rho2 * col_mass[..cols].iter().zip(&p.target).map(|(&a, &b)| kl_term(a, b)).sum::<f64>();
    }
    value
}

/// Exhaustive grid search over couplings, zooming in around the incumbent.
///
/// Hard (infinite-weight) marginals are eliminated through the feasible
/// parameterization. Returns the best coupling and its objective value.
pub fn grid_minimize(p: &TransportProblem, spec: &GridSpec) -> Result<(Mat, f64)> {
    let (rows, cols) = p.shape();
    if rows * cols > ORACLE_CELL_CAP {
        return Err(Error::OracleCapExceeded { cells: rows * cols, limit: ORACLE_CELL_CAP });
    }
    if spec.resolution < 3 || spec.refinement_rounds < 1 || !(spec.mass_upper_bound > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid grid spec {spec:?}")));
    }
    let param = Parameterization::new(p, spec.mass_upper_bound);
    let dim = param.free.len();
    let mut lo = vec![0.0; dim];
    let mut hi = param.upper.clone();
    let mut best: Option<(f64, Vec<f64>)> = None;

    for _ in 0..spec.refinement_rounds {
        let res = spec.resolution;
        let points = res
            .checked_pow(dim as u32)
            .ok_or(Error::OracleCapExceeded { cells: rows * cols, limit: ORACLE_CELL_CAP })?;
        let round_best = (0..points)
            .into_par_iter()
            .fold(
                || (f64::INFINITY, usize::MAX, vec![0.0; dim], vec![0.0; rows * cols]),
                |mut acc, idx| {
                    let (ref mut best_v, ref mut best_idx, ref mut x, ref mut w) = acc;
                    let mut rem = idx;
                    for k in 0..dim {
                        let t = (rem % res) as f64 / (res - 1) as f64;
                        rem /= res;
                        x[k] = lo[k] + t * (hi[k] - lo[k]);
                    }
                    if param.assemble(x, w) {
                        let v = evaluate(p, w, rows, cols);
                        if v < *best_v || (v == *best_v && idx < *best_idx) {
                            *best_v = v;
                            *best_idx = idx;
                        }
                    }
                    acc
                },
            )
            .map(|(v, idx, _, _)| (v, idx))
            .reduce(|| (f64::INFINITY, usize::MAX), |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });

        let (value, idx) = round_best;
        if idx == usize::MAX {
            break;
        }
        let mut rem = idx;
        let mut x = vec![0.0; dim];
        for k in 0..dim {
            let t = (rem % res) as f64 / (res - 1) as f64;
            rem /= res;
            x[k] = lo[k] + t * (hi[k] - lo[k]);
        }
        if best.as_ref().is_none_or(|(b, _)| value <= *b) {
            best = Some((value, x.clone()));
        }
        let center = &best.as_ref().expect("incumbent set above").1;
        for k in 0..dim {
            let half = ZOOM_SPACINGS * (hi[k] - lo[k]) / (res - 1) as f64;
            lo[k] = (center[k] - half).max(0.0);
            hi[k] = (center[k] + half).min(param.upper[k]);
        }
    }

    let (value, x) = best.ok_or_else(|| Error::InvalidArgument("no feasible grid point".into()))?;
    let mut w = vec![0.0; rows * cols];
    param.assemble(&x, &mut w);
    let w = Mat::new(rows, cols, w.into_iter().map(|e| e.max(0.0)).collect())?;
    Ok((w, value))
}

/// Central finite differences `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFiniteEvaluation { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Normwise relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Shapes small enough for [`grid_minimize`].
pub const SMALL_SHAPES: [(usize, usize); 4] = [(2, 2), (2, 3), (3, 2), (1, 3)];

/// `count` seeded instances cycling through [`SMALL_SHAPES`], with λ from
/// {0.05, 0.1}, ρ₁ and ρ₂ from {0.5, 1, INF}, costs in [0, 1) and marginal
/// entries in [0.2, 1). Instances with both ρ infinite get equal total mass;
/// the rest get independent masses.
pub fn random_small_instances(count: usize, seed: u64) -> Vec<TransportProblem> {
    let mut r = rng::stream(seed, "oracle-instances");
    (0..count)
        .map(|k| {
            let (rows, cols) = SMALL_SHAPES[k % SMALL_SHAPES.len()];
            let lambda = [0.05, 0.1][r.random_range(0..2)];
            let rho = [0.5, 1.0, INF];
            let (rho1, rho2) = (rho[r.random_range(0..3)], rho[r.random_range(0..3)]);
            let cost = Mat::from_fn(rows, cols, |_, _| r.random_range(0.0..1.0));
            let source: Vec<f64> = (0..rows).map(|_| r.random_range(0.2..1.0)).collect();
            let mut target: Vec<f64> = (0..cols).map(|_| r.random_range(0.2..1.0)).collect();
            if rho1.is_infinite() && rho2.is_infinite() {
                let scale = source.iter().sum::<f64>() / target.iter().sum::<f64>();
                target.iter_mut().for_each(|x| *x *= scale);
            }
            TransportProblem::new(cost, source, target, lambda, rho1, rho2).expect("valid by construction")
        })
        .collect()
}
