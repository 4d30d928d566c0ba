use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("grammar error at position {position}: {message}")]
    Grammar { position: usize, message: String },

    #[error("division error: {0}")]
    Division(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("frozen parameters drifted: {0:?}")]
    FrozenDrift(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
