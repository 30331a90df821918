//! Experiment runner for the `gcldr` command.

pub mod checks;
pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_evaluate, cmd_export, cmd_generate, cmd_gradcheck, cmd_taylor, cmd_train, ExportFormat};
pub use config::ExperimentConfig;
pub use report::{RunEntry, RunReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(gcldr_core::GcldrError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::CheckFailed(_) => 4,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
