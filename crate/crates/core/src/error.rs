use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("degenerate embedding: row {row} has zero norm")]
    DegenerateEmbedding { row: usize },

    #[error("degenerate encoding: zero vector before normalization")]
    DegenerateEncoding,

    #[error("negative mass at entry {index}")]
    NegativeMass { index: usize },

    #[error("zero reference mass at entry {index}")]
    ZeroReferenceMass { index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical blowup at iteration {iteration}")]
    NumericalBlowup { iteration: usize },

    #[error("zero marginal mass in {side} marginal at entry {index}")]
    ZeroMarginalMass { side: &'static str, index: usize },

    #[error("marginal mass mismatch: source {source_mass}, target {target_mass}")]
    MarginalMassMismatch { source_mass: f64, target_mass: f64 },

    #[error("marginal constraint violated on {side} side: L1 residual {residual:e}")]
    MarginalConstraintViolated { side: &'static str, residual: f64 },

    #[error("gradient at non-optimum: transport plan did not converge")]
    GradientAtNonOptimum,

    #[error("oracle cap exceeded: {cells} cells (limit {limit})")]
    OracleCapExceeded { cells: usize, limit: usize },

    #[error("non-finite function value at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("schema violation in {path}: {reason}")]
    SchemaViolation { path: String, reason: String },

    #[error("no descriptions for class {0:?}")]
    NoDescriptions(String),

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("not an embedding file: {0}")]
    NotEmbeddingFile(PathBuf),

    #[error("corrupt file: {0}")]
    CorruptFile(PathBuf),

    #[error("invalid payload: {0}")]
    InvalidPayload(PathBuf),

    #[error("not a checkpoint: {0}")]
    NotCheckpoint(PathBuf),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("empty split {0:?}")]
    EmptySplit(String),

    #[error("divergence: non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("class {class:?}, sample {sample:?}: {source}")]
    Scoring {
        class: String,
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
