use thiserror::Error;

#[derive(Debug, Error)]
pub enum SalientError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("format error in field `{field}`: {detail}")]
    Format { field: &'static str, detail: String },
    #[error("training error: non-finite gradient in parameter `{param}`")]
    Training { param: String },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("placement error: {0}")]
    Placement(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SalientError> = std::result::Result<T, E>;

impl SalientError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        SalientError::Dimension(msg.into())
    }
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SalientError::Validation(msg.into())
    }
    pub(crate) fn format(field: &'static str, detail: impl Into<String>) -> Self {
        SalientError::Format { field, detail: detail.into() }
    }
}
