use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("grammar error at byte {pos}: {msg}")]
    Grammar { pos: usize, msg: String },

    #[error("value {value} out of range [0, 999]")]
    Range { value: u64 },

    #[error("box corners out of order: {0}")]
    Ordering(String),

    #[error("capacity exceeded: position {position} beyond max length {max_len}")]
    Capacity { position: usize, max_len: usize },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
