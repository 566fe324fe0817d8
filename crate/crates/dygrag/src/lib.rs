//! File formats, checkpoints, configuration and the staged pipeline around
//! `dygrag-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod report;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use pipeline::{run_matrix, Pipeline, Stage};
