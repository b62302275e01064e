//! File formats, dataset loading and the command-line driver for
//! `pyrabox-core`.

pub mod checks;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;

pub use config::CliConfig;
pub use error::{AppError, AppResult, FormatError};
