use thiserror::Error;

/// Errors produced by the estimators, bandit runners and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Parameters fall outside the regime in which the guarantees hold.
    #[error("configuration error: {0}")]
    Config(String),

    /// A linear-algebra kernel could not complete (for example a non-PD matrix).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The rounding grid collapsed to zero width because the confidence radius is zero.
    #[error("degenerate grid: confidence radius is zero so the grid width alpha is 0")]
    DegenerateGrid,

    /// A diagnostic needs a per-run record the trajectory does not carry.
    #[error("trajectory is missing the `{0}` record")]
    MissingRecord(&'static str),

    #[error("trial {trial}: {source}")]
    Trial {
        trial: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors that stem from invalid configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::ConfigParse(_) => true,
            Error::Trial { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
