//! Experiment driver: configuration, checkpoints and one function per CLI verb.
//!
//! Every command is a plain function returning a report, so the same pipeline
//! can be driven from the `deme` binary or from tests.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use checkpoint::{Checkpoint, Provenance};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
