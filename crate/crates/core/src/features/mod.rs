//! Local visual embeddings: file-backed feature sets, a synthetic dataset
//! generator, and embedding-space augmentation.

mod augment;
mod dataset;
mod emb1;

pub use augment::augment;
pub use dataset::{slug, synth_dataset, DatasetManifest, SampleEntry, Split, SynthSpec, SYNTH_CLASS_NAMES};
pub use emb1::{decode_embedding, encode_embedding, read_embedding_file, write_embedding_file, MAGIC};

use crate::error::{Error, Result};
use crate::numerics::{normalize_rows, Mat};

/// `M` local embeddings of one sample with their transport masses.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// `M × d`, unit-norm rows.
    pub features: Mat,
    /// Nonnegative, summing to 1.
    pub weights: Vec<f64>,
    pub label: Option<String>,
    pub sample_id: String,
}

impl FeatureSet {
    /// Normalizes the rows of `features` and assigns uniform weights.
    pub fn new(mut features: Mat, label: Option<String>, sample_id: impl Into<String>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidArgument("feature set has no rows".into()));
        }
        normalize_rows(&mut features)?;
        let m = features.rows();
        Ok(Self { features, weights: vec![1.0 / m as f64; m], label, sample_id: sample_id.into() })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Global embedding: the weighted mean of the rows, normalized.
    pub fn global(&self) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        for (i, w) in self.weights.iter().enumerate() {
            for (a, x) in g.iter_mut().zip(self.features.row(i)) {
                *a += w * x;
            }
        }
        crate::numerics::normalized(&g).ok_or(Error::DegenerateEmbedding { row: 0 })
    }
}
