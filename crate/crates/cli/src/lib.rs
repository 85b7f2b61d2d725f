//! Configuration, file formats, synthetic data and the command pipeline
//! around `evstllm-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod synth;

pub use config::PipelineConfig;
pub use error::{CliError, CliResult};
