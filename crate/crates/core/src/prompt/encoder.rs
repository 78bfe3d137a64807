use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, Mat};

/// Frozen text encoder: mean-pool over tokens, fixed linear map, fixed bias,
/// unit normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoder {
    /// `d_tok × d`.
    pub projection: Mat,
    pub bias: Vec<f64>,
}

impl FrozenEncoder {
    pub fn seeded(token_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Normal::new(0.0, 1.0 / (token_dim as f64).sqrt()).expect("valid normal");
        let projection = Mat::from_fn(token_dim, embed_dim, |_, _| proj.sample(&mut rng));
        let small = Normal::new(0.0, 0.1 / (embed_dim as f64).sqrt()).expect("valid normal");
        let bias = (0..embed_dim).map(|_| small.sample(&mut rng)).collect();
        Self { projection, bias }
    }

    pub fn token_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.cols()
    }

    fn check(&self, tokens: &Mat) -> Result<()> {
        if tokens.cols() != self.token_dim() || tokens.rows() == 0 || self.bias.len() != self.embed_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} tokens for a {}x{} encoder",
                tokens.rows(),
                tokens.cols(),
                self.token_dim(),
                self.embed_dim()
            )));
        }
        Ok(())
    }

    /// Affine image of the mean token, before normalization.
    pub fn pre_normalization(&self, tokens: &Mat) -> Result<Vec<f64>> {
        self.check(tokens)?;
        let pooled = Mat::new(1, tokens.cols(), tokens.col_means())?;
        let mut z = pooled.matmul(&self.projection)?.into_vec();
        for (zi, b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        Ok(z)
    }

    pub fn encode(&self, tokens: &Mat) -> Result<Vec<f64>> {
        let z = self.pre_normalization(tokens)?;
        let n = norm2(&z);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEncoding);
        }
        Ok(z.into_iter().map(|x| x / n).collect())
    }

    /// Gradient with respect to `tokens` given `upstream = ∂loss/∂encode(tokens)`.
    pub fn backward(&self, tokens: &Mat, upstream: &[f64]) -> Result<Mat> {
        if upstream.len() != self.embed_dim() {
            return Err(Error::ShapeMismatch("upstream gradient length".into()));
        }
        let z = self.pre_normalization(tokens)?;
        let n = norm2(&z);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEncoding);
        }
        let y: Vec<f64> = z.iter().map(|x| x / n).collect();
        let radial = dot(&y, upstream);
        let dz: Vec<f64> = upstream.iter().zip(&y).map(|(g, yi)| (g - yi * radial) / n).collect();
        let d_pooled = Mat::new(1, dz.len(), dz)?.matmul_t(&self.projection)?;
        let per_row = 1.0 / tokens.rows() as f64;
        let mut grad = Mat::zeros(tokens.rows(), tokens.cols());
        for i in 0..tokens.rows() {
            for (g, p) in grad.row_mut(i).iter_mut().zip(d_pooled.as_slice()) {
                *g = p * per_row;
            }
        }
        Ok(grad)
    }
}

pub fn encode_prompt(tokens: &Mat, encoder: &FrozenEncoder) -> Result<Vec<f64>> {
    encoder.encode(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_diff_grad, relative_error};
    use rand::Rng;

    fn random_tokens(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Mat {
        Mat::from_fn(l, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identical_tokens_identical_unit_embeddings() {
        let enc = FrozenEncoder::seeded(8, 6, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tokens(&mut rng, 5, 8);
        let a = encode_prompt(&t, &enc).unwrap();
        let b = encode_prompt(&t.clone(), &enc).unwrap();
        assert_eq!(a, b);
        assert!((norm2(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outputs_are_unit_norm() {
        let enc = FrozenEncoder::seeded(32, 32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let t = random_tokens(&mut rng, 8, 32);
            assert!((norm2(&enc.encode(&t).unwrap()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_before_normalization() {
        let enc = FrozenEncoder::seeded(8, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tokens(&mut rng, 6, 8);
        let b = random_tokens(&mut rng, 6, 8);
        let mut mid = a.clone();
        mid.add_scaled(&b, 1.0);
        let mid = mid.map(|x| 0.5 * x);
        let za = enc.pre_normalization(&a).unwrap();
        let zb = enc.pre_normalization(&b).unwrap();
        let zm = enc.pre_normalization(&mid).unwrap();
        for ((m, x), y) in zm.iter().zip(&za).zip(&zb) {
            assert!((m - 0.5 * (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pre_normalization_is_degenerate() {
        let enc = FrozenEncoder { projection: Mat::zeros(3, 2), bias: vec![0.0, 0.0] };
        let err = enc.encode(&Mat::filled(2, 3, 1.0)).unwrap_err();
        assert!(err.to_string().contains("degenerate encoding"));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let enc = FrozenEncoder::seeded(8, 4, 5);
        assert!(matches!(enc.encode(&Mat::zeros(2, 7)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let enc = FrozenEncoder::seeded(6, 5, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tokens(&mut rng, 4, 6);
        let probe: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = enc.backward(&t, &probe).unwrap();
        let fd = finite_diff_grad(
            |x| dot(&enc.encode(&Mat::new(4, 6, x.to_vec()).unwrap()).unwrap(), &probe),
            t.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(relative_error(g.as_slice(), &fd) < 1e-4);
    }
}
