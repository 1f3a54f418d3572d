//! Batch driver for the crossdiff solver: configuration files, the `run`,
//! `reference` and `study-convergence` commands, and CSV output.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::RunConfig;
pub use error::CliError;
