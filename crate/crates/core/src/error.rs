use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// A slot name (or other schema reference) that the schema does not define.
    #[error("schema violation: {0}")]
    Schema(String),
    /// Invalid configuration or precondition.
    #[error("configuration error: {0}")]
    Config(String),
    /// A data value breaks a corpus invariant.
    #[error("invalid data: {0}")]
    Data(String),
    /// Vector widths or sequence lengths that do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Predictions and gold examples that cannot be compared.
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

pub type Result<T> = core::result::Result<T, Error>;
