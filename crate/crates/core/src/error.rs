//! Crate-wide error type.

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed line in a line-delimited input file.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A value that violates a documented invariant.
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },

    /// A problem attributable to one corpus pair.
    #[error("pair {id}: {msg}")]
    Pair { id: u64, msg: String },

    /// A problem attributable to one formatted document.
    #[error("document (origin pair {origin_id}): {msg}")]
    Document { origin_id: u64, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad configuration: {0}")]
    Config(String),

    /// A binary artifact whose header or payload does not match the format.
    #[error("{path}: {msg}")]
    FileFormat { path: PathBuf, msg: String },

    /// Training produced a non-finite loss.
    #[error(
        "training diverged at step {step}; last finite loss {last_finite_loss} at step {last_finite_step}"
    )]
    Diverged {
        step: u64,
        last_finite_step: u64,
        last_finite_loss: f64,
    },
}

impl Error {
    /// Adapter for `map_err` when touching `path`.
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn file(path: &Path, msg: impl Into<String>) -> Error {
        Error::FileFormat {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
