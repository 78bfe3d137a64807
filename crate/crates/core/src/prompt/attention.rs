use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Mat};

/// Single-head self-attention weights shared by every class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: Mat,
    pub key: Mat,
    pub value: Mat,
}

impl AttentionParams {
    /// Small random query/key maps and a value map close to the identity, so
    /// the adapter starts out passing description tokens through.
    pub fn init(token_dim: usize, key_dim: usize, rng: &mut impl Rng) -> Self {
        let qk = Normal::new(0.0, 0.1 / (token_dim as f64).sqrt()).expect("valid normal");
        let jitter = Normal::new(0.0, 0.02).expect("valid normal");
        let query = Mat::from_fn(token_dim, key_dim, |_, _| qk.sample(rng));
        let key = Mat::from_fn(token_dim, key_dim, |_, _| qk.sample(rng));
        let value = Mat::from_fn(token_dim, key_dim, |i, j| f64::from(u8::from(i == j)) + jitter.sample(rng));
        Self { query, key, value }
    }

    pub fn token_dim(&self) -> usize {
        self.query.rows()
    }

    pub fn key_dim(&self) -> usize {
        self.query.cols()
    }

    fn check(&self, tokens: &Mat) -> Result<()> {
        let d = self.token_dim();
        let k = self.key_dim();
        if [&self.query, &self.key, &self.value].iter().any(|m| m.shape() != (d, k)) {
            return Err(Error::ShapeMismatch("attention weights differ in shape".into()));
        }
        if tokens.cols() != d || tokens.rows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} tokens for {d}-dimensional attention",
                tokens.rows(),
                tokens.cols()
            )));
        }
        Ok(())
    }
}

struct Forward {
    q: Mat,
    k: Mat,
    v: Mat,
    /// Row-stochastic attention weights, `L × L`.
    weights: Mat,
    output: Mat,
}

fn forward(tokens: &Mat, params: &AttentionParams) -> Result<Forward> {
    params.check(tokens)?;
    let q = tokens.matmul(&params.query)?;
    let k = tokens.matmul(&params.key)?;
    let v = tokens.matmul(&params.value)?;
    let scale = 1.0 / (params.key_dim() as f64).sqrt();
    let scores = q.matmul_t(&k)?;
    let mut weights = Mat::zeros(scores.rows(), scores.cols());
    for i in 0..scores.rows() {
        let row: Vec<f64> = scores.row(i).iter().map(|s| s * scale).collect();
        weights.row_mut(i).copy_from_slice(&softmax(&row)?);
    }
    let output = weights.matmul(&v)?;
    Ok(Forward { q, k, v, weights, output })
}

/// `softmax(Q Kᵀ / √d_k) V` with `Q = T W_Q`, `K = T W_K`, `V = T W_V`.
pub fn attention_forward(tokens: &Mat, params: &AttentionParams) -> Result<Mat> {
    Ok(forward(tokens, params)?.output)
}

/// Gradients of a scalar loss with respect to the attention inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub tokens: Mat,
    pub query: Mat,
    pub key: Mat,
    pub value: Mat,
}

/// Backpropagates `upstream = ∂loss/∂output` through [`attention_forward`].
pub fn attention_backward(tokens: &Mat, params: &AttentionParams, upstream: &Mat) -> Result<AttentionGrads> {
    let f = forward(tokens, params)?;
    if upstream.shape() != f.output.shape() {
        return Err(Error::ShapeMismatch("upstream gradient shape".into()));
    }
    let scale = 1.0 / (params.key_dim() as f64).sqrt();
    let d_v = f.weights.t_matmul(upstream)?;
    let d_weights = upstream.matmul_t(&f.v)?;

    // Row-wise softmax Jacobian: dS = A ⊙ (dA − rowsum(dA ⊙ A)).
    let mut d_scores = Mat::zeros(f.weights.rows(), f.weights.cols());
    for i in 0..f.weights.rows() {
        let a = f.weights.row(i);
        let da = d_weights.row(i);
        let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        for (out, (x, y)) in d_scores.row_mut(i).iter_mut().zip(a.iter().zip(da)) {
            *out = x * (y - inner) * scale;
        }
    }
    let d_q = d_scores.matmul(&f.k)?;
    let d_k = d_scores.t_matmul(&f.q)?;

    let mut d_tokens = d_q.matmul_t(&params.query)?;
    d_tokens.add_scaled(&d_k.matmul_t(&params.key)?, 1.0);
    d_tokens.add_scaled(&d_v.matmul_t(&params.value)?, 1.0);
    Ok(AttentionGrads {
        tokens: d_tokens,
        query: tokens.t_matmul(&d_q)?,
        key: tokens.t_matmul(&d_k)?,
        value: tokens.t_matmul(&d_v)?,
    })
}
