//! Learning possibly-cyclic causal graphs and their missingness mechanisms
//! from incomplete interventional data.
//!
//! The pipeline: simulate structural equation models with block-parallel
//! MNAR missingness ([`synth`]), impute missing coordinates by rejection or
//! exact Gaussian sampling ([`impute`]), and maximize a penalized
//! expected log-likelihood by alternating EM ([`train`]). Densities come
//! from contractive residual maps whose log-determinant is either exact
//! (linear) or estimated by a roulette-truncated power series with
//! Hutchinson trace probes ([`likelihood`]).

pub mod checkpoint;
pub mod graph;
pub mod impute;
pub mod likelihood;
pub mod missing;
pub(crate) mod numeric;
pub mod rng;
pub mod sem;
pub mod synth;
pub mod train;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("singular Jacobian: the residual map is not invertible at this point")]
    SingularJacobian,
    #[error("fixed-point iteration did not converge after {max_iter} steps (residual {residual:.3e}); model is likely not contractive")]
    FixedPointDiverged { max_iter: usize, residual: f64 },
    #[error("posterior precision is not positive definite")]
    NotPositiveDefinite,
    #[error("no complete cases available to initialize the missingness model")]
    NoCompleteCases,
    #[error("rejection proposal mismatch: every proposal for record {record} had zero posterior weight")]
    ProposalMismatch { record: usize },
    #[error("non-finite gradient in epoch {epoch}; aborting")]
    NonFiniteGradient { epoch: usize },
    #[error("{path}: row {row}: {message}")]
    Data {
        path: String,
        row: usize,
        message: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
