//! Experiment runner around `epg-core`: JSON configs, checkpoints, CSV
//! traces, SVG plots and the command implementations behind the CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod exec;
pub mod plot;
pub mod stats;
pub mod traces;

pub use error::{CliError, Result};
