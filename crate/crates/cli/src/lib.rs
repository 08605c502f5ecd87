//! Command-line front end: run specifications, dataset generation, metric
//! files and run comparison.

use std::io;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use mat_core::{DataError, TrainError};

pub mod compare;
pub mod config;
pub mod metrics;
pub mod run;

pub use compare::{compare, CompareReport};
pub use config::{RawSpec, RunSpec};
pub use metrics::{MetricRecord, METRIC_COLUMNS};
pub use run::{run, RunOptions, RunSummary};

#[derive(Debug, Error)]
pub enum CliError {
    /// `line` is 0 when the problem is not tied to one line.
    #[error("{}{message}", if *line > 0 { format!("line {line}: ") } else { String::new() })]
    Spec { line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("incompatible runs: {0}")]
    Compatibility(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Format(String),
}

impl CliError {
    pub fn spec(line: usize, message: String) -> Self {
        CliError::Spec { line, message }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Spec { .. } => "spec",
            CliError::Io { .. } => "io",
            CliError::Locked(_) => "locked",
            CliError::Compatibility(_) => "compatibility",
            CliError::Train(TrainError::NonFinite { .. }) => "non_finite",
            CliError::Train(_) => "train",
            CliError::Data(_) => "data",
            CliError::Format(_) => "format",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Spec { .. } | CliError::Data(_) => 2,
            CliError::Train(TrainError::NonFinite { .. }) => 3,
            CliError::Compatibility(_) => 4,
            CliError::Locked(_) => 5,
            _ => 1,
        }
    }

    /// Machine-readable form written to `error.json`.
    pub fn record(&self) -> ErrorRecord {
        let mut r = ErrorRecord {
            kind: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
            line: None,
            epoch: None,
            step: None,
            sample: None,
        };
        match self {
            CliError::Spec { line, .. } if *line > 0 => r.line = Some(*line),
            CliError::Train(TrainError::NonFinite { epoch, step, sample, .. }) => {
                r.epoch = Some(*epoch);
                r.step = Some(*step);
                r.sample = Some(*sample);
            }
            _ => {}
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub message: String,
    pub exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}
