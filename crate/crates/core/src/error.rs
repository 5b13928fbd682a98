use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported format: expected {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error("sampler diverged at step {step}")]
    Divergence { step: usize },
    #[error("record {record_id}: every candidate was flagged down to guidance {last_guidance}")]
    Unsatisfiable { record_id: u64, last_guidance: f64 },
    #[error("{dropped} of {total} records unsatisfiable at the guidance floor: {ids}")]
    UnsatisfiableRecords { dropped: usize, total: usize, ids: String },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("uncalibrated re-identification filter")]
    Uncalibrated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Unsatisfiable { .. } | Error::UnsatisfiableRecords { .. } => 4,
            _ => 3,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::Divergence { .. } => "divergence",
            Error::Unsatisfiable { .. } | Error::UnsatisfiableRecords { .. } => "unsatisfiable",
            Error::Evaluation(_) => "evaluation",
            Error::Uncalibrated => "uncalibrated",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
