//! Experiment harness: run configuration and the `ber`, `train` and `sweep`
//! subcommands.

pub mod commands;
pub mod config;
