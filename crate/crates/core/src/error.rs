use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants split into two families: input problems (bad files, invalid
/// records, impossible requests) and computational failures (optimizer did
/// not converge, non-finite objective). [`Error::is_input_error`] tells them
/// apart so frontends can pick an exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid record at line {line}: {message}")]
    InvalidRecord { line: u64, message: String },

    #[error("duplicate record at line {line}: {key}")]
    DuplicateRecord { line: u64, key: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate parameters: {0}")]
    DegenerateParams(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no start converged ({attempted} attempted)")]
    NoStartConverged { attempted: usize },

    #[error("split rejected: {0}")]
    Split(String),

    #[error("all {0} cross-validation combinations were skipped")]
    AllSkipped(usize),

    #[error("{failed} of {total} bootstrap refits failed (limit is 10%)")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("infeasible allocation: {0}")]
    Infeasible(String),

    #[error("unachievable target loss: {0}")]
    Unachievable(String),

    #[error("missing epochs for record {0}")]
    MissingEpochs(usize),

    #[error("zero mean for parameter {0}")]
    ZeroMean(String),

    #[error("unknown format: {0}")]
    UnknownFormat(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    /// True for errors caused by the caller's input rather than by a
    /// numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::InvalidRecord { .. }
                | Error::DuplicateRecord { .. }
                | Error::InvalidArgument(_)
                | Error::Domain(_)
                | Error::Precondition(_)
                | Error::Infeasible(_)
                | Error::Unachievable(_)
                | Error::MissingEpochs(_)
                | Error::UnknownFormat(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
