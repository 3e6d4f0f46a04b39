use thiserror::Error;

use crate::autodiff::GraphError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("sample {index} out of range for batch of {batch}")]
    SampleOutOfRange { index: usize, batch: usize },
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
