use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("schema error{}: {msg}", line_suffix(*.line))]
    Schema { line: Option<usize>, msg: String },

    #[error("parse error{}: {msg}", line_suffix(*.line))]
    Parse { line: Option<usize>, msg: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("caption error: {0}")]
    Caption(String),

    #[error("prototype for class '{class}' of task '{task}' has not been initialized")]
    UninitializedPrototype { task: String, class: String },

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in loss component '{component}' at step {step}")]
    NonFinite { component: String, step: u64 },

    #[error("empty evaluation set")]
    EmptyTestSet,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

impl Error {
    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema {
            line: None,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for invalid input, 2 for runtime or numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema { .. }
            | Error::Parse { .. }
            | Error::Split(_)
            | Error::Caption(_)
            | Error::Version { .. }
            | Error::Config(_)
            | Error::Json { .. }
            | Error::EmptyTestSet
            | Error::UninitializedPrototype { .. } => 1,
            Error::Shape { .. }
            | Error::Dimension(_)
            | Error::DegenerateBatch(_)
            | Error::Backward(_)
            | Error::NonFinite { .. }
            | Error::Io { .. }
            | Error::Csv(_) => 2,
        }
    }
}
