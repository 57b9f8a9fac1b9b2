use stats::StatsError;
use thiserror::Error;
use tubekit::KitError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Kit(#[from] KitError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 configuration, 3 data, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Kit(KitError::Config(_) | KitError::UnknownLoss(_)) => 2,
            CliError::Kit(KitError::Divergence(_)) => 4,
            CliError::Stats(StatsError::Invalid(_)) => 2,
            _ => 3,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
