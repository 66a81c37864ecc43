use std::path::PathBuf;

use thiserror::Error;

/// Process exit status for a passing run.
pub const EXIT_PASS: i32 = 0;
/// A check ran to completion and failed.
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(#[source] nth_lab_core::Error),

    #[error("numerical failure in {context}: {source}")]
    NumericalAt {
        context: String,
        #[source]
        source: nth_lab_core::Error,
    },

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Numerical(e) | LabError::NumericalAt { source: e, .. } => match e {
                nth_lab_core::Error::InvalidConfig(_) | nth_lab_core::Error::InvalidDataset(_) => EXIT_CONFIG,
                _ => EXIT_NUMERICAL,
            },
            LabError::Config(_)
            | LabError::Read { .. }
            | LabError::Write { .. } | LabError::Json { .. } | LabError::Csv { .. } => EXIT_CONFIG,
        }
    }

    pub fn at(context: impl Into<String>) -> impl FnOnce(nth_lab_core::Error) -> LabError {
        let context = context.into();
        move |source| LabError::NumericalAt { context, source }
    }
}

impl From<nth_lab_core::Error> for LabError {
    fn from(e: nth_lab_core::Error) -> Self {
        LabError::Numerical(e)
    }
}

pub type LabResult<T> = Result<T, LabError>;
