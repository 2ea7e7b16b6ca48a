use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("could not place {n_objects} objects without overlap after {tries} tries")]
    Placement { n_objects: usize, tries: usize },

    #[error("object count mismatch: state has {state}, goal has {goal}")]
    ObjectCount { state: usize, goal: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: missing file")]
    Missing { path: PathBuf },

    #[error("{path}: bad header: {msg}")]
    Header { path: PathBuf, msg: String },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated after record {last_valid:?} of {expected}")]
    Truncated {
        path: PathBuf,
        last_valid: Option<u64>,
        expected: u64,
    },

    #[error("{path}: record {index}: {msg}")]
    InvalidRecord {
        path: PathBuf,
        index: u64,
        msg: String,
    },

    #[error("{}: {msg}", config_origin(*line))]
    Config { line: usize, msg: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {terms}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        terms: String,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Invalid(_) => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}

fn config_origin(line: usize) -> String {
    if line == 0 {
        "config override".into()
    } else {
        format!("config line {line}")
    }
}
