use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid attention layout: {0}")]
    Layout(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("mean over an empty selection in {0}")]
    EmptyMean(&'static str),

    #[error("conditioning on zero-probability evidence")]
    ZeroEvidence,

    #[error("training error: non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension { .. } => "dimension",
            Error::Range(_) => "range",
            Error::Layout(_) => "layout",
            Error::Domain(_) => "domain",
            Error::EmptyMean(_) => "empty_mean",
            Error::ZeroEvidence => "zero_evidence",
            Error::NonFiniteGradient { .. } => "training",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
