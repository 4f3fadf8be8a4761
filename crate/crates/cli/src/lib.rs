//! Pipeline commands behind the `capmin` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod svg;

pub use commands::Context;
pub use config::Config;
pub use error::{CliError, CliResult};
pub use output::Format;
