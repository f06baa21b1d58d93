use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate box {0:?}: zero area")]
    DegenerateBox([f64; 4]),

    #[error("incomplete track {track_id}: no box available at frame {frame}")]
    IncompleteTrack { track_id: u64, frame: i64 },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("embedding error for category {category:?}: {reason}")]
    Embedding { category: String, reason: String },

    #[error("stage-order error: {0}")]
    StageOrder(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("referential error at line {line}: {message}")]
    Reference { line: usize, message: String },

    #[error("corrupt weights file: {0}")]
    Corruption(String),

    #[error("unsupported weights format version {0}")]
    Version(u32),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input (files, flags, configs) as
    /// opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Numeric(_) | Error::Diverged { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
