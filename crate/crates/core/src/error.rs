use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric argument outside its allowed range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// NaN/Inf produced by a forward op or seen in a gradient.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A ranking metric that is undefined for the given labels.
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// A configuration that failed validation; one entry per offending field.
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("not a recognised container (magic {found:?})")]
    BadMagic { found: [u8; 4] },

    #[error("container version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed container header: {0}")]
    Header(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the message of a contextless error with a prefix.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            Error::MetricUndefined(m) => Error::MetricUndefined(format!("{what}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{what}: {m}")),
            Error::Dimension(m) => Error::Dimension(format!("{what}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{what}: {m}")),
            other => other,
        }
    }
}
