use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("baseline `{baseline}` missing for benchmark `{benchmark}`")]
    MissingBaseline { benchmark: String, baseline: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for StatsError {
    fn from(e: csv::Error) -> Self {
        StatsError::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for StatsError {
    fn from(e: serde_json::Error) -> Self {
        StatsError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, StatsError>;
