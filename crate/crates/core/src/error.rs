use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported code width {bits} (maximum {max})")]
    UnsupportedWidth { bits: usize, max: usize },

    #[error("rank list is empty")]
    EmptyList,

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("average precision is undefined: the rank list has no relevant entry")]
    UndefinedAp,

    #[error("no base code lies within Hamming radius {radius}")]
    EmptyBall { radius: u32 },

    #[error("bound ratio is undefined: {0}")]
    UndefinedRatio(String),

    #[error("rank correlation is undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("construction not applicable: {0}")]
    NotApplicable(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name, used in structured CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::UnsupportedWidth { .. } => "unsupported_width",
            Error::EmptyList => "empty_list",
            Error::InvalidQuery(_) => "invalid_query",
            Error::UndefinedAp => "undefined_ap",
            Error::EmptyBall { .. } => "empty_ball",
            Error::UndefinedRatio(_) => "undefined_ratio",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::NotApplicable(_) => "not_applicable",
            Error::Infeasible(_) => "infeasible",
            Error::InvalidState(_) => "invalid_state",
            Error::Divergence(_) => "training_divergence",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
