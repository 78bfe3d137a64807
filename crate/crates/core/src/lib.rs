//! Entropic optimal transport, entropic unbalanced optimal transport, and a
//! dual-context prompt alignment classifier built on top of them.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense matrices and stable reductions
//! - [`transport`]: the scaling solvers, primal/dual objectives, batching
//! - [`oracle`]: brute-force grid minimization and finite differences
//! - [`outlier`]: the partial-matching instance contrasting OT and UOT
//! - [`prompt`]: description files, token banks, attention adapter, frozen encoder
//! - [`features`]: embedding files, synthetic datasets, augmentation
//! - [`classifier`]: transport-based class scores, likelihood and loss
//! - [`trainer`]: backpropagation through fixed plans, Adam, ablations

pub mod classifier;
pub mod error;
pub mod features;
pub mod numerics;
pub mod oracle;
pub mod outlier;
pub mod prompt;
pub mod rng;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
pub use numerics::Mat;
pub use transport::{SolverConfig, TransportPlan, TransportProblem, INF};
