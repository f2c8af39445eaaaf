//! Command-line front end for mixed-frequency factor imputation.

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod prepare;

pub use commands::execute;
pub use config::RunConfig;
