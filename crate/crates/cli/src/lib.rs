//! Command-line front end: configuration, checkpoints and the subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
