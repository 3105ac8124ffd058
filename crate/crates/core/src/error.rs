use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix asymmetry {relative:.3e} exceeds tolerance")]
    AsymmetricBeyondTolerance { relative: f64 },
    #[error("symmetric eigendecomposition did not converge")]
    ConvergenceFailure,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite cost encountered")]
    NonFiniteCost,
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("rotation matrix is not orthonormal (deviation {deviation:.3e})")]
    InvalidRotation { deviation: f64 },
    #[error("step index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("control cost matrix R at step {step} is not positive definite")]
    SingularR { step: usize },
    #[error("state cost matrix Q at step {step} is not positive semi-definite")]
    IndefiniteQ { step: usize },
    #[error("determinant budget must be positive, got {alpha}")]
    NonPositiveAlpha { alpha: f64 },
    #[error("covariance solver did not converge within {iterations} iterations")]
    SolverDivergence { iterations: usize },
    #[error("all {samples} rollouts diverged")]
    AllRolloutsDiverged { samples: usize },
    #[error("offline covariance cache exhausted at step {t} (length {len})")]
    CacheExhausted { t: usize, len: usize },
    #[error("nominal controller rollout diverged at step {t}")]
    NominalRolloutDiverged { t: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
