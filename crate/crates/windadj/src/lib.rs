//! Command-line front end and file formats for `windadj-core`.

pub use windadj_core as core;

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod io;
pub mod log;
pub mod parallel;

pub use error::{CliError, CliResult};
