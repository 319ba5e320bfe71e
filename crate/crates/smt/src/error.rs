use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum SmtError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk data: bad magic, truncated payload, inconsistent header.
    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was called before the state it depends on was fitted.
    #[error("state error: {0}")]
    State(String),

    /// The requested embedding dimensions exceed the usable rank.
    #[error("rank error: requested {requested} dimensions but effective rank is {rank}")]
    Rank { requested: usize, rank: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Statistics accumulated under one mode were used under another.
    #[error("mode mismatch: expected {expected}, got {got}")]
    ModeMismatch { expected: String, got: String },

    #[error("unknown token: {0:?}")]
    UnknownToken(String),

    /// A pipeline stage was invoked without its upstream artifact.
    #[error("missing dependency: stage `{stage}` requires artifact `{missing}`")]
    MissingDependency { stage: String, missing: String },

    /// An artifact was produced under a different configuration than the
    /// one trying to consume it.
    #[error("config hash mismatch for {artifact}: expected {expected}, found {found}")]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl SmtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SmtError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SmtError>;
