//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor shape did not match what an operation expected.
    #[error("shape mismatch at `{node}`: {detail}")]
    Shape { node: String, detail: String },

    /// A primitive produced NaN or an infinity.
    #[error("non-finite value produced by `{node}`")]
    NumericOverflow { node: String },

    /// A precondition of a public operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A domain tried to claim an element that is not free.
    #[error("ownership overlap in `{tensor}` at flat index {index}: element is {current}")]
    Overlap {
        tensor: String,
        index: usize,
        current: String,
    },

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    /// Not enough free parameters left for a requested budget.
    #[error("insufficient capacity in `{tensor}`: need {needed} free elements, have {available}")]
    Capacity {
        tensor: String,
        needed: usize,
        available: usize,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch for `{tensor}`")]
    Checksum { tensor: String },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// Wraps an error with the pipeline stage that produced it.
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, looking through stage wrappers.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NumericOverflow { .. } => "numeric-overflow",
            Error::Contract(_) => "contract",
            Error::Overlap { .. } => "overlap",
            Error::UnknownDomain(_) => "unknown-domain",
            Error::Capacity { .. } => "capacity",
            Error::Version { .. } => "version",
            Error::Checksum { .. } => "checksum",
            Error::Truncated(_) => "truncated",
            Error::Format(_) => "format",
            Error::Data(_) => "data",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Stage { source, .. } => source.kind(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

/// Attach stage context to a fallible result.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
