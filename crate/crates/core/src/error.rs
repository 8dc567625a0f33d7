use std::path::PathBuf;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined cup-to-disc ratio: {0}")]
    UndefinedCdr(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical abort at step {step}: {detail}")]
    NumericalAbort { step: usize, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension { op, msg: msg.into() }
    }

    pub(crate) fn shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            msg: format!("{lhs:?} vs {rhs:?}"),
        }
    }

    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
