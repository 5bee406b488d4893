use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Every variant maps onto a short machine-parsable category (see
/// [`Error::category`]) which the command-line front end prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("decode error: {0}")]
    Decode(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("empty sequence: {0}")]
    EmptySequence(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("empty evaluation: {0}")]
    EmptyEval(String),
    #[error("serialization error: {0}")]
    Serialization(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Decode(_) => "decode",
            Error::UnsupportedFormat(_) => "unsupported_format",
            Error::Config { .. } => "config",
            Error::Shape(_) => "shape",
            Error::Label(_) => "label",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::Framing(_) => "framing",
            Error::EmptySequence(_) => "empty_sequence",
            Error::Manifest(_) => "manifest",
            Error::Split(_) => "split",
            Error::Training(_) => "training",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyEval(_) => "empty_eval",
            Error::Serialization(_) => "serialization",
            Error::Io(_) => "io",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
