//! Experiment driver for `pgrd`: dataset generation, two-stage training,
//! sampling, evaluation, step-count benchmarks and gradient checks, each
//! leaving a replay manifest next to its outputs.
//!
//! The `pgrd` binary is a thin argument parser over [`commands`].

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use config::{ArchSpec, RunConfig, SamplerSpec};
pub use error::CliError;
