//! Library surface of the `sqnt` binary: argument structs, manifest
//! machinery, and the command implementations, exposed so integration
//! tests can drive the pipeline in-process.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;

pub use error::{CliError, CliResult};
