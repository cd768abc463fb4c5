//! Stage runner, hand-label server and CLI for the trial census pipeline.

pub mod cli;
pub mod config;
pub mod manifest;
pub mod server;
pub mod stages;
pub mod tools;

pub use config::{parse_config, validate_config, ConfigError, PipelineConfig};
pub use manifest::{RunManifest, Stage, Step};
pub use stages::{Runner, StageError, StepOutcome};
