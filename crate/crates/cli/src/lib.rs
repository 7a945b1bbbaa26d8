//! Command-line front end: CSV data, key=value configs, JSON model
//! archives, simulation campaigns and precision-network export.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod network;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
