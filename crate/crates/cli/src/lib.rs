//! Experiment commands behind the `patchblender` binary.
//!
//! Every command is a function from a configuration (plus an optional
//! checkpoint) to files and a printed report. Failures carry a stable exit
//! code: 1 for a failed check, 2 for bad configuration or input, 3 for
//! training divergence.

pub mod commands;
pub mod config;
pub mod reference;

use std::fmt;

pub use config::{ExperimentConfig, IoConfig, LoadedConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const CHECK: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DIVERGED: u8 = 3;

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: Self::CONFIG,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self {
            code: Self::CHECK,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<patchblender::Error> for CliError {
    fn from(e: patchblender::Error) -> Self {
        let code = match e {
            patchblender::Error::NonFinite { .. } => Self::DIVERGED,
            _ => Self::CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::config(e.to_string())
    }
}
