use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,
    #[error("non-finite input")]
    NonFinite,
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("empty bag")]
    EmptyBag,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no tiles after mask")]
    NoTilesAfterMask,
    #[error("degenerate labels")]
    DegenerateLabels,
    #[error("degenerate curve")]
    DegenerateCurve,
    #[error("no positive predictions")]
    NoPositivePredictions,
    #[error("singular information matrix at column {0}")]
    Singular(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input")]
    Truncated,
    #[error("format error: {0}")]
    Format(String),
    #[error("unknown key: {0}")]
    UnknownKey(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by malformed or incompatible data rather than
    /// by bad arguments.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic
                | Error::UnsupportedVersion(_)
                | Error::Truncated
                | Error::Format(_)
                | Error::Dimension(_)
                | Error::EmptyBag
                | Error::DegenerateLabels
                | Error::DegenerateCurve
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
