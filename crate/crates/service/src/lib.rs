//! Pipeline orchestration, the `/v1` HTTP API and the `cotloop` command line.

pub mod api;
pub mod cli;
pub mod pipeline;

pub use pipeline::{Pipeline, PipelineError};
