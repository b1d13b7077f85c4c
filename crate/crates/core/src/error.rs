use std::fmt;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid patch width {q}: must be between 1 and pixel count {p}")]
    InvalidPatchWidth { q: usize, p: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(ConfigIssue),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at row {row}, column {column}: {msg}")]
    Parse { row: usize, column: usize, msg: String },

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A configuration problem, optionally tied to a key and a source line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.key, self.line) {
            (Some(k), Some(l)) => write!(f, "`{k}` (line {l}): {}", self.msg),
            (Some(k), None) => write!(f, "`{k}`: {}", self.msg),
            (None, Some(l)) => write!(f, "line {l}: {}", self.msg),
            (None, None) => f.write_str(&self.msg),
        }
    }
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(ConfigIssue { key: None, line: None, msg: msg.into() })
    }

    pub(crate) fn config_key(key: &str, msg: impl Into<String>) -> Self {
        Error::Config(ConfigIssue { key: Some(key.to_string()), line: None, msg: msg.into() })
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for errors caused by bad user configuration rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Validates a keep rate ξ ∈ (0, 1].
pub(crate) fn check_keep_rate(keep_rate: f64) -> Result<()> {
    if keep_rate > 0.0 && keep_rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::config_key("keep_rate", format!("{keep_rate} is outside (0, 1]")))
    }
}
