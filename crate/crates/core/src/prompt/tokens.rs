//! Frozen word embedding stand-in: each lowercased word maps to a unit
//! vector drawn from a generator seeded by its FNV-1a hash and a global seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{normalized, Mat};
use crate::rng::{fnv1a, mix64};

const PAD: &str = "<pad>";

/// Lowercased alphanumeric words of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

pub fn embed_word(word: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(fnv1a(word.to_lowercase().as_bytes()) ^ seed));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

/// `len × dim` token matrix: one row per word, truncated to `len` words and
/// padded with a fixed pad vector.
pub fn tokenize(text: &str, dim: usize, len: usize, seed: u64) -> Result<Mat> {
    let ws = words(text);
    if ws.is_empty() {
        return Err(Error::InvalidArgument("cannot tokenize empty text".into()));
    }
    let pad = embed_word(PAD, dim, seed);
    let mut data = Vec::with_capacity(len * dim);
    for k in 0..len {
        match ws.get(k) {
            Some(w) => data.extend(embed_word(w, dim, seed)),
            None => data.extend_from_slice(&pad),
        }
    }
    Mat::new(len, dim, data)
}

/// Class-name token: normalized mean of the name's word embeddings.
pub fn class_word(name: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    let ws = words(name);
    if ws.is_empty() {
        return Err(Error::InvalidArgument(format!("class name {name:?} has no words")));
    }
    let mut acc = vec![0.0; dim];
    for w in &ws {
        for (a, x) in acc.iter_mut().zip(embed_word(w, dim, seed)) {
            *a += x;
        }
    }
    normalized(&acc).ok_or_else(|| Error::InvalidArgument(format!("class name {name:?} embeds to zero")))
}
