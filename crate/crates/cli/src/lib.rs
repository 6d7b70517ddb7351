//! Configuration and experiment commands behind the `dqfleet` binary.

pub mod commands;
pub mod config;
