//! Error classification into process exit codes.

use std::fmt;

use bams::config::ConfigError;
use bams::dataset::DataError;
use bams::eval::EvalError;
use bams::model::{CheckpointError, ModelError};
use bams::synth::SynthError;
use bams::trainer::TrainError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_SCHEMA: i32 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    pub fn new(code: i32, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::new(EXIT_CONFIG, e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::Io { .. } => EXIT_IO,
            DataError::Manifest { .. } | DataError::Schema(_) => EXIT_SCHEMA,
            DataError::Invalid(_) => EXIT_CONFIG,
        };
        Self::new(code, e.to_string())
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(e) => e.into(),
            SynthError::Data(e) => e.into(),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Self::new(EXIT_SCHEMA, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io { .. } => EXIT_IO,
            _ => EXIT_SCHEMA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Self::new(EXIT_NUMERIC, e.to_string()),
            TrainError::Data(e) => e.into(),
            TrainError::Model(e) => e.into(),
            TrainError::Checkpoint(e) => e.into(),
            TrainError::Output { .. } => Self::new(EXIT_IO, e.to_string()),
            TrainError::NoSequences | TrainError::NoAnchors | TrainError::Feature(_) | TrainError::Hoa(_) => {
                Self::new(EXIT_SCHEMA, e.to_string())
            }
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => Self::new(EXIT_IO, e.to_string()),
            EvalError::Data(e) => e.into(),
            EvalError::Model(e) => e.into(),
            EvalError::Invalid(_) => Self::new(EXIT_CONFIG, e.to_string()),
            EvalError::Shape(_)
            | EvalError::SingleClass { .. }
            | EvalError::NoSamples { .. }
            | EvalError::UnknownSequence(_) => Self::new(EXIT_SCHEMA, e.to_string()),
        }
    }
}
