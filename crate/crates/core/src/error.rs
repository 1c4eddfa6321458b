use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error: non-finite value produced by {op}")]
    Numeric { op: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("simulation blew up at step {step}: max |u| = {max_abs:e}")]
    Simulation { step: usize, max_abs: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("degenerate kernel: sigma_t = 0 at t = {t}, k = {k}")]
    DegenerateKernel { t: f64, k: f64 },

    #[error("velocity quotient is singular at t = 1")]
    Singularity,

    #[error("bound regime error: {0}")]
    Regime(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },

    #[error("checkpoint mismatch: expected architecture {expected}, found {found}")]
    Checkpoint { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code: 1 usage or configuration, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) | Error::Checkpoint { .. } | Error::Dimension { .. } => 1,
            Error::Numeric { .. }
            | Error::Simulation { .. }
            | Error::UndefinedMetric(_)
            | Error::DegenerateKernel { .. }
            | Error::Singularity
            | Error::Regime(_) => 2,
            Error::Io(_) | Error::Corruption(_) | Error::Version { .. } | Error::Serde(_) => 3,
        }
    }
}
