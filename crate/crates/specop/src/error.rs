use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix contains NaN or Inf entries")]
    NonFinite,

    #[error("decomposition backend did not converge")]
    DecompositionFailure,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("point lies outside the map's declared domain: {0}")]
    DomainError(String),

    #[error("map `{map}` does not support {operation}")]
    Unsupported { map: String, operation: String },

    #[error("map is not differentiable at the evaluation point")]
    NotDifferentiable,

    #[error("spectrum of the perturbed point crossed a group boundary of the base point")]
    PartitionMismatch,

    #[error("dense assembly too large: {size} entries exceeds the {limit} guard")]
    TooLarge { size: usize, limit: usize },

    #[error("map `{0}` carries no certificate for the generalized-Jacobian hypotheses at this base point (rerun with force to proceed heuristically)")]
    HypothesisUnverified(String),

    #[error("rejection sampling exhausted after {0} draws")]
    SamplingExhausted(usize),

    #[error("retries exhausted after {0} attempts")]
    RetriesExhausted(usize),

    #[error("quadrature unsupported: coupled map of dimension {dim} > {limit} without a closed form")]
    QuadratureUnsupported { dim: usize, limit: usize },

    #[error("maximum iterations ({0}) reached before convergence")]
    MaxIterations(usize),

    #[error("inner linear solve failed: {0}")]
    LinearSolveFailure(String),

    #[error("invalid configuration: {0}")]
    ConfigError(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
