use std::io;

use thiserror::Error;

/// Errors produced anywhere in the segmentation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate cluster {cluster}: all memberships are zero")]
    DegenerateCluster { cluster: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error in tensor `{tensor}`: {message}")]
    Checkpoint { tensor: String, message: String },

    #[error("backward already ran on this graph")]
    AlreadyBackpropagated,

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("image {index}: {source}")]
    Image {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors a caller should report as a configuration problem.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::Shape(_) => true,
            Error::Image { source, .. } => source.is_config(),
            _ => false,
        }
    }

    /// True for NaN/inf failures during training.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) => true,
            Error::Image { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
