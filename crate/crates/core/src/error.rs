use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of operands do not agree.
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// A scalar parameter (eps, fraction, precision...) is out of its domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An index (position, token id, step) is out of range.
    #[error("range error: {0}")]
    Range(String),

    /// A caller broke an API contract, e.g. backward on a non-scalar.
    #[error("contract error: {0}")]
    Contract(String),

    /// A configuration violates one of its invariants.
    #[error("config error: {0}")]
    Config(String),

    /// A forward op produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// The optimizer saw a NaN/inf gradient; training aborts with context.
    #[error(
        "non-finite gradient for parameter `{param}` at step {step} (last loss {last_loss:?})"
    )]
    NonFiniteGradient {
        step: usize,
        param: String,
        last_loss: Option<f64>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
