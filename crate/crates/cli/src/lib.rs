//! Command-line front end for the `sdrl` experiments.
//!
//! Every command writes into one run directory and finishes with an atomic
//! `manifest.json`. Primary values go to stdout, diagnostics to stderr.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{run, Cli};
pub use error::{CliError, Result};
