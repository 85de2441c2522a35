use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or weight shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A parameter is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Matching needs at least as many predictions as ground truths.
    #[error("assignment needs G <= N, got {rows} ground truths and {cols} predictions")]
    NotEnoughColumns { rows: usize, cols: usize },

    /// Exhaustive matching is capped to keep enumeration tractable.
    #[error("exhaustive matcher supports at most {max} predictions, got {got}")]
    BruteForceCap { max: usize, got: usize },

    /// A binary or text format could not be parsed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
