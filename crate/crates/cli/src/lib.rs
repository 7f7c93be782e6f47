//! Command-line front end: run configs, artifact layout and the
//! generate / separate / evaluate / sweep commands.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
