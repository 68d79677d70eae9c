//! Error-to-exit-code mapping.
//!
//! The contract: 1 for data/validation problems (bad rows, degenerate
//! requests, broken artifacts), 2 for usage and I/O problems, 3 when artifact
//! fingerprints disagree (the caller mixed outputs of different pipelines).

use std::fmt;

use flowlm::discretizer::DiscretizerError;
use flowlm::evaluator::EvalError;
use flowlm::ingest::IngestError;
use flowlm::model::{CheckpointError, ModelError};
use flowlm::sequencer::SequencerError;
use flowlm::trainer::TrainError;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or unreadable/unwritable files: exit 2.
    Usage(String),
    /// Invalid data or artifacts: exit 1.
    Data(String),
    /// Fingerprint/lineage mismatch between artifacts: exit 3.
    Fingerprint(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Data(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Fingerprint(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Fingerprint(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("io error: {e}"))
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match &e {
            IngestError::Io(_) => CliError::Usage(e.to_string()),
            // The csv reader reports unreadable files through its own error
            // type; that is a usage problem, not bad data.
            IngestError::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DiscretizerError> for CliError {
    fn from(e: DiscretizerError) -> Self {
        match e {
            DiscretizerError::Io(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ConfigMismatch(_) => CliError::Fingerprint(e.to_string()),
            CheckpointError::Io { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SequencerError> for CliError {
    fn from(e: SequencerError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Checkpoint(inner) => inner.into(),
            TrainError::Io { .. } => CliError::Usage(e.to_string()),
            TrainError::BadConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Model(_) | TrainError::Sequencer(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ConfigMismatch(_) => CliError::Fingerprint(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json error: {e}"))
    }
}
