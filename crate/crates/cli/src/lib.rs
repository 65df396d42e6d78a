//! Command-line front end for `ebike-core`: scenario files, presets, CSV and
//! SVG output, and the `run`, `identify` and `sweep` commands.

pub mod commands;
pub mod logio;
pub mod presets;
pub mod report;
pub mod scenario_file;
pub mod svg;

use ebike_core::Error as CoreError;

/// Failure of a CLI command, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Identification(String),
    #[error("unknown sweep parameter `{0}`")]
    UnknownParameter(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) | CliError::UnknownParameter(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Identification(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NumericalFault { .. } | CoreError::NotLocked { .. } => CliError::Numerical(e.to_string()),
            CoreError::NotIdentifiable => CliError::Identification(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
