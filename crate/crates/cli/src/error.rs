use std::path::PathBuf;

use serde::Serialize;
use smc_search::events::LogError;
use smc_search::EngineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("no run at {}", .0.display())]
    MissingRun(PathBuf),
    #[error("{} already holds a run; use `resume` or another directory", .0.display())]
    RunExists(PathBuf),
    #[error("corrupt log: {0}")]
    CorruptLog(LogError),
    #[error("no checkpoint to resume from")]
    NoCheckpoint,
    #[error("{0}")]
    Engine(EngineError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::NoCheckpoint => CliError::NoCheckpoint,
            EngineError::Config(c) => CliError::Config(c.to_string()),
            other => CliError::Engine(other),
        }
    }
}

impl From<LogError> for CliError {
    fn from(e: LogError) -> Self {
        match e {
            LogError::Io(io) => CliError::Io(io),
            corrupt => CliError::CorruptLog(corrupt),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(std::io::Error::other(e))
    }
}

/// Machine-readable error written to stderr and `error.json`.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_good_seq: Option<u64>,
    pub exit_code: i32,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingRun(_) => "missing_run",
            CliError::RunExists(_) => "run_exists",
            CliError::CorruptLog(_) => "corrupt_log",
            CliError::NoCheckpoint => "no_checkpoint",
            CliError::Engine(_) => "engine",
            CliError::Io(_) => "io",
            CliError::ChecksFailed { .. } => "checks_failed",
        }
    }

    /// 2 for problems found before any work, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::RunExists(_) => 2,
            _ => 1,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            error: self.kind(),
            message: self.to_string(),
            last_good_seq: match self {
                CliError::CorruptLog(e) => e.last_good_seq(),
                _ => None,
            },
            exit_code: self.exit_code(),
        }
    }
}
