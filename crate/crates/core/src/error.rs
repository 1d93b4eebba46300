use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("index {index} outside [{lo}, {hi}]")]
    Index { index: usize, lo: usize, hi: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("tape does not belong to this network")]
    TapeMismatch,

    #[error("gate failed: {0}")]
    Gate(String),

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated entry '{0}'")]
    Truncated(String),

    #[error("missing checkpoint entry '{0}'")]
    MissingEntry(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schedule(_) => "schedule",
            Error::Dimension { .. } => "dimension",
            Error::Index { .. } => "index",
            Error::Invalid(_) => "invalid",
            Error::NonFinite { .. } => "non_finite",
            Error::TapeMismatch => "tape_mismatch",
            Error::Gate(_) => "gate",
            Error::BadMagic => "bad_magic",
            Error::Version { .. } => "version",
            Error::Truncated(_) => "truncated",
            Error::MissingEntry(_) => "missing_entry",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
