use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdvitError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MdvitError>;

impl MdvitError {
    pub fn config(msg: impl Into<String>) -> Self {
        MdvitError::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        MdvitError::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        MdvitError::Contract(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        MdvitError::Data(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        MdvitError::Checkpoint(msg.into())
    }
}
