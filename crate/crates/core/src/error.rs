use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("schedule/state mismatch: {0}")]
    State(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
