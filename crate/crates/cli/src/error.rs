use qphase_core::datagen::DatasetError;
use qphase_core::gem::GemError;
use qphase_core::groundstate::GroundStateError;
use qphase_core::shadows::ShadowError;
use qphase_nn::{ModelError, TrainError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Data(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Config(m) => CliError::Config(m),
            DatasetError::Io(e) => CliError::Io(e),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ShadowError> for CliError {
    fn from(e: ShadowError) -> Self {
        match e {
            ShadowError::TooFewSnapshots { .. } => CliError::Config(e.to_string()),
            ShadowError::EstimatorUndefined { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<GemError> for CliError {
    fn from(e: GemError) -> Self {
        match e {
            GemError::Unsupported { .. } | GemError::WindowSize(_) => CliError::Config(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<GroundStateError> for CliError {
    fn from(e: GroundStateError) -> Self {
        match e {
            GroundStateError::NotConverged { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::ShadowCount { .. } => CliError::Config(e.to_string()),
            TrainError::Io(e) => CliError::Io(e),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
