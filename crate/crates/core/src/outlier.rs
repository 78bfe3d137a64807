//! Partial-matching instance: a few prompts, many image tokens, only some of
//! which match a prompt. The remaining columns are outliers whose features are
//! unrelated to every prompt.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_matrix, normalize_rows, Mat};
use crate::rng;
use crate::transport::{solve_uot, SolverConfig, TransportPlan, TransportProblem, INF};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierSpec {
    pub prompts: usize,
    pub images: usize,
    /// Columns `0..matches` match prompt `j % prompts`; the rest are outliers.
    pub matches: usize,
    pub dim: usize,
    /// Expected norm of the noise added to a matched prompt to form its image.
    pub match_noise: f64,
    pub lambda: f64,
    #[serde(with = "crate::transport::serde_rho")]
    pub rho1: f64,
    #[serde(with = "crate::transport::serde_rho")]
    pub rho2: f64,
    pub seed: u64,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self {
            prompts: 4,
            images: 20,
            matches: 4,
            dim: 64,
            match_noise: 0.1,
            lambda: 0.01,
            rho1: INF,
            rho2: 0.04,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutlierInstance {
    pub prompts: Mat,
    pub images: Mat,
    /// `1 − cosine`, prompts × images.
    pub cost: Mat,
    pub outlier_columns: Vec<usize>,
}

impl OutlierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.prompts == 0 || self.images == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument("prompts, images and dim must be positive".into()));
        }
        if self.matches > self.images {
            return Err(Error::InvalidArgument(format!("{} matches exceed {} images", self.matches, self.images)));
        }
        if !(self.match_noise >= 0.0 && self.match_noise.is_finite()) {
            return Err(Error::InvalidArgument("match_noise must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<OutlierInstance> {
        self.validate()?;
        let mut r = rng::stream(self.seed, "outlier-instance");
        let mut gauss = |_: usize, _: usize| -> f64 { StandardNormal.sample(&mut r) };
        let mut prompts = Mat::from_fn(self.prompts, self.dim, &mut gauss);
        normalize_rows(&mut prompts)?;
        let mut images = Mat::from_fn(self.images, self.dim, &mut gauss);
        let scale = self.match_noise / (self.dim as f64).sqrt();
        for j in 0..self.matches {
            let p = prompts.row(j % self.prompts).to_vec();
            for (x, pk) in images.row_mut(j).iter_mut().zip(p) {
                *x = pk + scale * *x;
            }
        }
        normalize_rows(&mut images)?;
        let cost = cosine_matrix(&prompts, &images)?.map(|c| 1.0 - c);
        Ok(OutlierInstance { prompts, images, cost, outlier_columns: (self.matches..self.images).collect() })
    }
}

impl OutlierInstance {
    pub fn is_outlier(&self, column: usize) -> bool {
        self.outlier_columns.binary_search(&column).is_ok()
    }

    /// Uniform-marginal problem on this instance.
    pub fn problem(&self, lambda: f64, rho1: f64, rho2: f64) -> Result<TransportProblem> {
        TransportProblem::uniform(self.cost.clone(), lambda, rho1, rho2)
    }

    /// Fraction of the coupling's total mass sitting on outlier columns.
    pub fn outlier_mass(&self, coupling: &Mat) -> f64 {
        let cols = coupling.col_sums();
        let total: f64 = cols.iter().sum();
        let outlier: f64 = self.outlier_columns.iter().map(|&j| cols[j]).sum();
        if total > 0.0 {
            outlier / total
        } else {
            0.0
        }
    }
}

/// Both plans on the same instance: balanced OT and the spec's UOT.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub instance: OutlierInstance,
    pub ot: TransportPlan,
    pub uot: TransportPlan,
}

impl Comparison {
    pub fn ot_outlier_mass(&self) -> f64 {
        self.instance.outlier_mass(&self.ot.coupling)
    }

    pub fn uot_outlier_mass(&self) -> f64 {
        self.instance.outlier_mass(&self.uot.coupling)
    }
}

pub fn compare(spec: &OutlierSpec, solver: &SolverConfig) -> Result<Comparison> {
    let instance = spec.build()?;
    let ot = solve_uot(&instance.problem(spec.lambda, INF, INF)?, solver)?;
    let uot = solve_uot(&instance.problem(spec.lambda, spec.rho1, spec.rho2)?, solver)?;
    Ok(Comparison { instance, ot, uot })
}
