use thiserror::Error;

/// Crate-wide error type. Variants carry human-readable diagnostics; shape
/// errors always name both offending shapes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("autodiff error: {0}")]
    Autodiff(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
