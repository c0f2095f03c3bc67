use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate state: {0}")]
    DegenerateState(String),
    #[error("dose at t={time} is not on the integration grid (step {step})")]
    DoseAlignment { time: f64, step: f64 },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("data error{}: {msg}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<u64>, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0} is undefined: {1}")]
    Undefined(&'static str, String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Tensor(#[from] tensornet::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data {
            line: None,
            msg: msg.into(),
        }
    }

    pub(crate) fn data_at(line: u64, msg: impl Into<String>) -> Self {
        Error::Data {
            line: Some(line),
            msg: msg.into(),
        }
    }

    /// True for failures caused by arithmetic blowing up rather than by bad
    /// input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Tensor(tensornet::Error::Numeric(_)))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
