use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelicError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("causality violation: {0}")]
    Causality(String),
    #[error("encode error: {0}")]
    Encode(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("malformed bitstream: {0}")]
    Bitstream(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl SelicError {
    /// True for failures caused by the input data rather than the model or
    /// its backends.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            SelicError::InvalidInput(_)
                | SelicError::Data(_)
                | SelicError::Io(_)
                | SelicError::Image(_)
                | SelicError::Bitstream(_)
                | SelicError::Decode(_)
                | SelicError::Encode(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, SelicError>;
