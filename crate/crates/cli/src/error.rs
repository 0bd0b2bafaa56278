use std::fmt;
use std::io;

use cxrlab::error::ModelError;
use cxrlab::train::checkpoint::CheckpointError;
use cxrlab::train::TrainError;
use serde_json::json;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Internal,
    Usage,
    Config,
    MissingFile,
    Fingerprint,
    Data,
}

impl ErrorKind {
    pub fn code(self) -> i32 {
        match self {
            ErrorKind::Internal => 1,
            ErrorKind::Usage => 2,
            ErrorKind::Config => 3,
            ErrorKind::MissingFile => 4,
            ErrorKind::Fingerprint => 5,
            ErrorKind::Data => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Internal => "internal",
            ErrorKind::Usage => "usage",
            ErrorKind::Config => "config",
            ErrorKind::MissingFile => "missing_file",
            ErrorKind::Fingerprint => "fingerprint_mismatch",
            ErrorKind::Data => "data",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    /// Adds the file or step that failed in front of the message.
    pub fn context(self, what: impl fmt::Display) -> Self {
        Self {
            kind: self.kind,
            message: format!("{what}: {}", self.message),
        }
    }

    /// One-line JSON record written to stderr.
    pub fn record(&self) -> String {
        json!({
            "error": {
                "kind": self.kind.name(),
                "code": self.kind.code(),
                "message": self.message,
            }
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind.name(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        let kind = match e.kind() {
            io::ErrorKind::NotFound => ErrorKind::MissingFile,
            io::ErrorKind::InvalidData | io::ErrorKind::InvalidInput | io::ErrorKind::UnexpectedEof => ErrorKind::Data,
            _ => ErrorKind::Internal,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let kind = match &e {
            CheckpointError::Io(io) if io.kind() == io::ErrorKind::NotFound => ErrorKind::MissingFile,
            CheckpointError::Io(_) => ErrorKind::Internal,
            CheckpointError::Fingerprint { .. } | CheckpointError::Incompatible(_) => ErrorKind::Fingerprint,
            CheckpointError::Malformed(_) | CheckpointError::Version(_) => ErrorKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let kind = match e {
            ModelError::Config(_) => ErrorKind::Config,
            ModelError::StaleState(_) => ErrorKind::Fingerprint,
            _ => ErrorKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Config(m) => Self::config(m),
            TrainError::Data(m) => Self::data(m),
        }
    }
}

impl From<cxrlab::stats::StatsError> for CliError {
    fn from(e: cxrlab::stats::StatsError) -> Self {
        Self::data(e.to_string())
    }
}
