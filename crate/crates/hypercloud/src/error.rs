use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform to a primitive's rule.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// A primitive produced or received a non-finite value.
    #[error("non-finite value in {op}: {details}")]
    NonFinite { op: &'static str, details: String },

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Operation requires a nonempty point cloud.
    #[error("empty point cloud: {0}")]
    EmptyCloud(String),

    /// Set distances over equally sized clouds got unequal sizes.
    #[error("point count mismatch: {0}")]
    SizeMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed text in a cloud or config file, with 1-based line number.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Checkpoint file is malformed, truncated, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Config JSON is malformed or missing a required field.
    #[error("config error: {0}")]
    Config(String),

    /// The training loss became non-finite.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
