use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular covariance ({context}): cholesky failed after maximum jitter")]
    SingularCovariance { context: String },

    #[error("propagation produced a non-finite value at sigma point {point}")]
    NonFinitePropagation { point: usize },

    #[error("integration produced a non-finite state at step {step}")]
    Integration { step: usize },

    #[error("{flagged} of {total} replicates left the domain box (limit 1%)")]
    FlaggedReplicates { flagged: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged after {0} consecutive non-finite gradients")]
    Divergence(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
