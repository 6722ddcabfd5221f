use std::path::Path;

use prompt_cache::bench::BenchError;
use prompt_cache::cache::CacheError;
use prompt_cache::compiler::CompileError;
use prompt_cache::engine::EngineError;
use prompt_cache::layout::LayoutError;
use prompt_cache::model::ModelError;
use prompt_cache::pml::{PmlError, ValidationReport};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("validation failed: {0}")]
    Validation(ValidationReport),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Capacity(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Invalid(_) => 2,
            CliError::Io(_) => 3,
            CliError::Capacity(_) => 4,
            CliError::Internal(_) => 5,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Io(_) => "io",
            CliError::Validation(_) => "validation",
            CliError::Invalid(_) => "invalid_input",
            CliError::Capacity(_) => "capacity",
            CliError::Internal(_) => "internal",
        }
    }

    /// Machine-readable form; validation failures print the report itself.
    pub fn to_json(&self) -> String {
        match self {
            CliError::Validation(report) => report.to_json(),
            other => json!({
                "error": other.kind(),
                "message": other.to_string(),
                "exit_code": other.exit_code(),
            })
            .to_string(),
        }
    }
}

impl From<PmlError> for CliError {
    fn from(e: PmlError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<LayoutError> for CliError {
    fn from(e: LayoutError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<CompileError> for CliError {
    fn from(e: CompileError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) | ModelError::PositionOutOfRange { .. } => {
                CliError::Invalid(e.to_string())
            }
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        match e {
            CacheError::CapacityExceeded { .. } => CliError::Capacity(e.to_string()),
            CacheError::Io(_)
            | CacheError::Truncated { .. }
            | CacheError::Corrupt { .. }
            | CacheError::VersionMismatch { .. }
            | CacheError::ConfigHashMismatch { .. } => CliError::Io(e.to_string()),
            CacheError::UnknownModule(_) | CacheError::PositionOverlap(..) => {
                CliError::Invalid(e.to_string())
            }
            CacheError::Model(m) => m.into(),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::ValidationFailed(report) => CliError::Validation(report),
            EngineError::Cache(c) => c.into(),
            EngineError::Model(m) => m.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::PositionOutOfRange { .. }
            | BenchError::TooFewTrials(_)
            | BenchError::NoLengths => CliError::Invalid(e.to_string()),
            BenchError::Io(_) => CliError::Io(e.to_string()),
            BenchError::Engine(inner) => inner.into(),
            other => CliError::Internal(other.to_string()),
        }
    }
}
