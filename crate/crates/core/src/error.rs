use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the translation pipeline.
///
/// Variants are grouped by the operator-facing failure class so that the CLI
/// can map them onto distinct exit codes (see [`Error::class`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("unpaired tile {0}")]
    UnpairedTile(String),

    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("invalid tile: {0}")]
    InvalidTile(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("super-resolver `{resolver}` failed: {reason}")]
    Resolver { resolver: String, reason: String },

    #[error("feature extractor `{extractor}` failed: {reason}")]
    Extractor { extractor: String, reason: String },

    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

/// Coarse failure class used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Checkpoint(_) => ErrorClass::Config,
            Error::UnpairedTile(_)
            | Error::UnreadableImage { .. }
            | Error::InvalidTile(_)
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Resolver { .. }
            | Error::Extractor { .. } => ErrorClass::Data,
            Error::Shape(_) | Error::NonFiniteLoss(_) | Error::Numeric(_) | Error::Tensor(_) => {
                ErrorClass::Numeric
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
