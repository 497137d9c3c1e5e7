use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("empty batch: every pixel carries the unlabeled sentinel")]
    EmptyBatch,
    #[error("generation error: {0}")]
    Generation(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
