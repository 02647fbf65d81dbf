use std::path::Path;

/// Process exit codes. Stable; documented in the README.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const RUNTIME: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => exit::CONFIG,
            Self::Data(_) => exit::DATA,
            Self::Runtime(_) => exit::RUNTIME,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::Runtime(format!("{}: {err}", path.display()))
    }

    /// Prefixes the message with a location such as `file:line`.
    pub fn at(self, locator: &str) -> Self {
        match self {
            Self::Config(m) => Self::Config(format!("{locator}: {m}")),
            Self::Data(m) => Self::Data(format!("{locator}: {m}")),
            Self::Runtime(m) => Self::Runtime(format!("{locator}: {m}")),
        }
    }
}

impl From<saclog_core::Error> for PipelineError {
    fn from(e: saclog_core::Error) -> Self {
        use saclog_core::Error as E;
        match e {
            E::Config(_) => Self::Config(e.to_string()),
            E::Schema(_) | E::Data(_) | E::Shape(_) | E::Evaluation(_) => Self::Data(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
