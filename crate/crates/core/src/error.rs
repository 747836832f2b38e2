use thiserror::Error;

use crate::data::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("ill-conditioned local model even at ridge strength {0}")]
    Conditioning(f64),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}
