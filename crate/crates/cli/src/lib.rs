//! Command-line plumbing for dagmix: run configs, training and evaluation
//! commands, parallel sweeps and median/IQR reports.

pub mod commands;
pub mod config;
pub mod report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("refusing to load checkpoint: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] dagmix_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for bad input, 3 for checkpoint refusal, 1 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        use dagmix_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Mismatch(_) | CliError::Core(E::CheckpointMismatch(_)) => 3,
            _ => 1,
        }
    }
}
