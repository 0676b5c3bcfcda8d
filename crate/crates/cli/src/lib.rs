//! Library half of the `dpfl` binary: config resolution and subcommands.

pub mod commands;
pub mod config;
