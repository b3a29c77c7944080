//! Library side of the `ncsr` binary: config parsing, JSON reports and the
//! subcommand implementations.

pub mod commands;
pub mod config;
pub mod report;
