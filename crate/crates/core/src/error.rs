use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the library.
///
/// The CLI maps these onto process exit codes: validation/config/io errors
/// exit with 1, numeric failures (NaN/divergence) with 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A forward pass produced a non-finite value; the step is aborted.
    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    /// A structured file (dataset, checkpoint) failed to parse.
    #[error("parse error in {path:?} at byte {offset}: {detail}")]
    Parse {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// Run configuration file rejected.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }
}
