use alloc::string::String;

/// Errors raised by the training core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("tape state error: {0}")]
    State(String),
    /// A non-finite value showed up where only finite numbers are allowed.
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    /// Training diverged; the trainer keeps the last finite state.
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid_input {
    ($($arg:tt)*) => { $crate::error::Error::InvalidInput(alloc::format!($($arg)*)) };
}
macro_rules! invalid_config {
    ($($arg:tt)*) => { $crate::error::Error::InvalidConfig(alloc::format!($($arg)*)) };
}
pub(crate) use invalid_config;
pub(crate) use invalid_input;
