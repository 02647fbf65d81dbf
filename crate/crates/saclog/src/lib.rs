//! File formats, configuration and pipeline commands around `saclog-core`.

pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod report;

pub use config::PipelineConfig;
pub use error::{exit, PipelineError, Result};
pub use pipeline::{Metrics, Pipeline, TrainMode};
