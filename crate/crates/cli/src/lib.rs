//! Command-line front end for the asced sampler: configuration, subcommands and exit codes.

pub mod commands;
pub mod config;

pub use config::{Overrides, RunConfig};
