//! Batch front end: problem files, CSV artifacts, run manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod table;

pub use error::{CliError, ExitCode};
