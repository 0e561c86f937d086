//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by tensor ops, model construction, and file I/O.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    Shape {
        op: &'static str,
        details: String,
    },
    /// Invalid configuration (hyperparameters, dimensions, plans).
    Config(String),
    /// Violated API contract (stale tape handle, non-scalar loss, duplicate id).
    Contract(String),
    /// Training diverged; carries diagnostics from the failing step.
    NanLoss {
        epoch: usize,
        step: usize,
        lr: f64,
        grad_norm: f64,
    },
    /// Checkpoint or cache file is malformed or has an unsupported version.
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, details } => write!(f, "shape error in {op}: {details}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::NanLoss {
                epoch,
                step,
                lr,
                grad_norm,
            } => write!(
                f,
                "loss is NaN at epoch {epoch} step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e})"
            ),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, details: String) -> Error {
    Error::Shape { op, details }
}
