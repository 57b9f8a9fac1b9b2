use thiserror::Error;

use tensor::TensorError;

#[derive(Debug, Error)]
pub enum KitError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("layer {0} is not present in the layer stack")]
    MissingLayer(usize),
    #[error("unknown loss identifier `{0}`")]
    UnknownLoss(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("malformed batch file: {0}")]
    Format(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KitError>;
