//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tensor math, model construction, data handling,
/// training and evaluation.
#[derive(Debug)]
pub enum Error {
    /// Two shapes that were required to agree did not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A tensor was constructed with inconsistent shape/length or
    /// non-finite entries.
    InvalidTensor(String),
    /// A scalar was required (e.g. the loss fed to backward).
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// The loss tensor handed to backward is not attached to this tape.
    DetachedLoss,
    /// An argument was outside its documented domain.
    InvalidArg(String),
    /// A model specification failed validation.
    InvalidSpec(String),
    /// A training configuration failed validation.
    InvalidConfig(String),
    /// A gradient became NaN/Inf; the optimizer step was aborted.
    NonFiniteGradient { param: String },
    /// A window model was asked to predict before seeing L samples.
    WindowUnderfull { seen: usize, needed: usize },
    /// A measured channel is constant over the evaluation horizon, so
    /// its NRMSE normalizer is zero.
    DegenerateChannel { channel: String, context: String },
    /// A trajectory is too short for the requested windows/segments.
    TrajectoryTooShort {
        id: String,
        len: usize,
        needed: usize,
    },
    /// Plant state left the configured bound during integration.
    PlantDiverged { step: usize, norm: f64 },
    /// Malformed or inconsistent data encountered while reading a file.
    Data {
        path: PathBuf,
        row: Option<usize>,
        detail: String,
    },
    /// Underlying I/O failure.
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::InvalidTensor(msg) => write!(f, "invalid tensor: {msg}"),
            Error::NotScalar { op, shape } => {
                write!(f, "{op}: expected a scalar, got shape {shape:?}")
            }
            Error::DetachedLoss => {
                write!(f, "backward: loss tensor is not recorded on this tape")
            }
            Error::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Error::InvalidSpec(msg) => write!(f, "invalid model spec: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid training config: {msg}"),
            Error::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter '{param}'; step aborted")
            }
            Error::WindowUnderfull { seen, needed } => {
                write!(
                    f,
                    "window holds {seen} of {needed} samples; feed more history before predicting"
                )
            }
            Error::DegenerateChannel { channel, context } => {
                write!(
                    f,
                    "channel '{channel}' is constant over the horizon ({context}); \
                     NRMSE is undefined"
                )
            }
            Error::TrajectoryTooShort { id, len, needed } => {
                write!(
                    f,
                    "trajectory '{id}' has {len} samples, at least {needed} required"
                )
            }
            Error::PlantDiverged { step, norm } => {
                write!(f, "plant state diverged at step {step} (|x| = {norm:.3e})")
            }
            Error::Data { path, row, detail } => match row {
                Some(r) => write!(f, "{}: row {r}: {detail}", path.display()),
                None => write!(f, "{}: {detail}", path.display()),
            },
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn data(path: impl Into<PathBuf>, row: Option<usize>, detail: impl Into<String>) -> Self {
        Error::Data { path: path.into(), row, detail: detail.into() }
    }
}
