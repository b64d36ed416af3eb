use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller supplied inconsistent or out-of-range arguments.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A covariance matrix could not be factorized even after jitter escalation.
    #[error(
        "covariance factorization failed for a {size}x{size} matrix \
         (diagonal range [{min_diag:.3e}, {max_diag:.3e}], last jitter {jitter:.1e})"
    )]
    Numerical {
        size: usize,
        min_diag: f64,
        max_diag: f64,
        jitter: f64,
    },

    /// A non-finite value appeared inside a numerical routine.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Hyperparameter training diverged.
    #[error("training diverged after {epochs} epochs: {reason}")]
    Training { epochs: usize, reason: String },

    /// Not enough observations to estimate a quantity.
    #[error("estimation failed: {0}")]
    Estimation(String),

    /// The trust region no longer intersects the feasible domain.
    #[error("trust region does not intersect the domain")]
    TrustRegion,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Argument(msg()))
    }
}
