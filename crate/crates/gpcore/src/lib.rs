//! Gaussian process modeling with exact, Laplace, EP, sparse and state-space
//! inference, hyperparameter MAP estimation and deterministic integration,
//! and predictive model assessment.

pub mod ep;
pub mod error;
pub mod exact;
pub mod kernels;
pub mod laplace;
pub mod likelihoods;
pub mod linalg;
pub mod model;
pub mod priors;
pub mod sparse;
pub mod statespace;
pub mod quad;

pub use error::{GpError, Result};
pub use kernels::{CovMatrix, Hyper, KernelKind, KernelSpec};
pub use likelihoods::{LikelihoodSpec, ObservationData, ObsPoint};
pub use priors::PriorSpec;
