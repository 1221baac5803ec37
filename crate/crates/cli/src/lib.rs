//! Library side of the `rpt` command: run configuration and pipeline stages.

pub mod commands;
pub mod config;
