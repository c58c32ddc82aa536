//! Command-line front end: run configs, tiled inference and subcommands.

pub mod commands;
pub mod config;
pub mod tiling;
