use kdp_core::{DenoiserError, MoeError, NumericsError, ScheduleError};
use kdp_driveworld::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("scenario {scenario}: {failures} expert episodes failed, retry cap exhausted")]
    Generation { scenario: String, failures: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("stats hash mismatch: checkpoint {expected}, dataset {found}")]
    StatsMismatch { expected: String, found: String },
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("training diverged: {cause}; diagnostic snapshot at {}", snapshot.display())]
    Diverged { cause: String, snapshot: std::path::PathBuf },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Moe(#[from] MoeError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
