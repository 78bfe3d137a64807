use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::numerics::normalize_rows;

/// Embedding-space stand-in for image augmentation.
///
/// Each row gets isotropic Gaussian noise with expected norm `jitter_sigma`
/// (per-coordinate deviation `jitter_sigma/√d`) and is renormalized; each
/// row's weight is zeroed with probability `drop_prob`, keeping at least one,
/// and the weights are renormalized to sum to 1.
pub fn augment(fs: &FeatureSet, jitter_sigma: f64, drop_prob: f64, rng_seed: u64) -> Result<FeatureSet> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::InvalidArgument(format!("drop_prob {drop_prob} outside [0, 1)")));
    }
    if !(jitter_sigma >= 0.0 && jitter_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("jitter_sigma {jitter_sigma} must be nonnegative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = fs.clone();
    if jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, jitter_sigma / (fs.dim() as f64).sqrt()).expect("valid normal");
        for x in out.features.as_mut_slice() {
            *x += noise.sample(&mut rng);
        }
        normalize_rows(&mut out.features)?;
    }
    if drop_prob > 0.0 {
        let mut keep: Vec<bool> = fs.weights.iter().map(|&w| w > 0.0 && !rng.random_bool(drop_prob)).collect();
        if !keep.iter().any(|&k| k) {
            let alive: Vec<usize> = (0..fs.len()).filter(|&j| fs.weights[j] > 0.0).collect();
            keep[alive[rng.random_range(0..alive.len())]] = true;
        }
        let total: f64 = fs.weights.iter().zip(&keep).filter(|(_, &k)| k).map(|(w, _)| w).sum();
        for (w, k) in out.weights.iter_mut().zip(keep) {
            *w = if k { *w / total } else { 0.0 };
        }
    }
    Ok(out)
}
