//! Crate-wide error type.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    InvalidArgument(String),
    /// An iterative method ran out of iterations; carries the best estimate
    /// reached so far and the iteration count.
    NonConvergence { best: f64, iterations: usize },
    /// A trajectory left the finite-float domain. Carries the last finite
    /// state and the time at which it was recorded.
    Divergence { t: f64, last_state: Vec<f64> },
    /// A state vector violated a model constraint (zero or non-finite
    /// magnetization, norm below the normalization floor, ...).
    InvalidState(String),
    /// Training produced a non-finite loss or state.
    TrainingDiverged { epoch: usize, batch: usize },
    /// FTMLE analysis was asked to differentiate through a layer that does
    /// not expose a Jacobian.
    UnsupportedLayer(String),
    /// An operation was called out of order (e.g. backward before forward).
    Usage(String),
    /// Byte-level parse failure; `offset` is the byte position in the input.
    Parse { offset: usize, what: String },
    /// Internal consistency check failed (e.g. adjoint checkpoint mismatch).
    Internal(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonConvergence { best, iterations } => write!(
                f,
                "no convergence after {iterations} iterations (best estimate {best:e})"
            ),
            Error::Divergence { t, .. } => {
                write!(f, "trajectory diverged (last finite state at t = {t})")
            }
            Error::InvalidState(msg) => write!(f, "invalid state: {msg}"),
            Error::TrainingDiverged { epoch, batch } => {
                write!(f, "training diverged at epoch {epoch}, batch {batch}")
            }
            Error::UnsupportedLayer(name) => write!(f, "unsupported layer: {name}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Parse { offset, what } => write!(f, "parse error at byte {offset}: {what}"),
            Error::Internal(msg) => write!(f, "internal error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
