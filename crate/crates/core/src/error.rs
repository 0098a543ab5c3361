use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("n-gram order {0} outside [1, 4]")]
    InvalidOrder(usize),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("image `{0}` has no captions")]
    NoCaptions(String),

    #[error("missing candidate caption for image `{0}`")]
    MissingCandidate(String),

    #[error("pool has {available} images, {requested} requested")]
    InsufficientPool { requested: usize, available: usize },

    #[error("group size K={k} must be smaller than the dataset ({images} images)")]
    GroupTooLarge { k: usize, images: usize },

    #[error("zero vector for `{0}`")]
    ZeroVector(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing template embedding for word `{0}`")]
    MissingTemplate(String),

    #[error("unknown token id {0}")]
    UnknownToken(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{context}: {message} (byte offset {offset})")]
    Binary {
        context: String,
        offset: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures of the filesystem itself, as opposed to bad content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
