use thiserror::Error;

/// Errors raised across the pipeline. Each variant maps to a stable
/// machine-parsable code used by the CLI (see `Error::code`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid window size {0}, expected 1, 2 or 3")]
    InvalidWindow(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown layer: {0}")]
    UnknownLayer(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short code for machine-parsable CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dim(_) => "E_DIM",
            Error::InvalidWindow(_) => "E_WINDOW",
            Error::NonFinite(_) => "E_NUMERIC",
            Error::UnknownLayer(_) => "E_LAYER",
            Error::EmptyInput(_) => "E_EMPTY",
            Error::Size(_) => "E_SIZE",
            Error::Length(_) => "E_LENGTH",
            Error::Lookup(_) => "E_LOOKUP",
            Error::Input(_) => "E_INPUT",
            Error::Parameter(_) => "E_PARAM",
            Error::Selection(_) => "E_SELECT",
            Error::Evaluation(_) => "E_EVAL",
            Error::Schema(_) => "E_SCHEMA",
            Error::Parse { .. } => "E_PARSE",
            Error::Config(_) => "E_CONFIG",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Pipeline(_) => "E_PIPELINE",
            Error::Io { .. } => "E_IO",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
