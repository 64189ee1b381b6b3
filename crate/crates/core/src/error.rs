use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("softmax slice has every position masked")]
    DegenerateSlice,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    State(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Wiring(String),
    #[error("unknown token: {0}")]
    Vocab(String),
    #[error("glyph atlas has no tile for {0:?}")]
    Atlas(String),
    #[error("{0}")]
    InputTooSmall(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parseable category, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::DegenerateSlice => "degenerate",
            Error::NonFinite { .. } => "nonfinite",
            Error::State(_) => "state",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Wiring(_) => "wiring",
            Error::Vocab(_) => "vocab",
            Error::Atlas(_) => "atlas",
            Error::InputTooSmall(_) => "input",
            Error::Checkpoint(_) => "load",
            Error::Diverged(_) => "diverged",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
