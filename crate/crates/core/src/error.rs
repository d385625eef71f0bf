use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("structural error: {0}")]
    Structure(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("undefined statistic: {0}")]
    Undefined(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used by the CLI for machine-parsable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Degenerate(_) => "degenerate",
            Error::Structure(_) => "structure",
            Error::Lookup(_) => "lookup",
            Error::Config(_) => "config",
            Error::Ingestion(_) => "ingestion",
            Error::Invariant(_) => "invariant",
            Error::Parse { .. } => "parse",
            Error::Undefined(_) => "undefined",
            Error::Diverged(_) => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Io error that names the file it concerns.
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
