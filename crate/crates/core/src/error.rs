use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller passed arguments that violate an operation's preconditions.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A function could not be evaluated (non-finite output, empty result set).
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    /// A value went NaN/Inf during a forward or backward pass.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    /// Broken tape invariant; indicates a bug rather than bad input.
    #[error("internal error: {0}")]
    Internal(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

macro_rules! ensure_arg {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Argument(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure_arg;
