use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument violated a precondition (empty token subset, index out of range, ...).
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Input data is unusable (non-finite values, degenerate structure).
    #[error("invalid data: {0}")]
    Data(String),
    /// Operand shapes do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// Stable rank requested for an all-zero spectrum.
    #[error("stable rank undefined: all singular values are zero")]
    UndefinedRank,
    /// PCA requested on a positional factor with no variation.
    #[error("degenerate manifold: positional factor has no variance")]
    DegenerateManifold,
    /// Probe optimisation produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(what: impl Into<String>) -> Error {
    Error::Dimension(what.into())
}
