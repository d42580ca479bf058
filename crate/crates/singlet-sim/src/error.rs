//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong while parsing a config or running a job.
#[derive(Debug, Error)]
pub enum SimError {
    /// A config file could not be read from disk.
    #[error("cannot read config {path}: {source}")]
    ConfigRead {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A config file is not valid JSON.
    #[error("cannot parse config {path}: {source}")]
    ConfigParse {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    /// A config field is missing or has an out-of-range value. `field` is
    /// the dotted path of the offending entry, e.g. `protocol.t_re`.
    #[error("invalid config field {field}: {reason}")]
    InvalidField { field: String, reason: String },

    /// An operator or state handed to a numerical routine has incompatible
    /// dimensions or violates a precondition (non-Hermitian input, invalid
    /// density matrix, empty index set).
    #[error("rejected input in {context}: {reason}")]
    InvalidInput { context: String, reason: String },

    /// The Liouvillian has more than one steady state, so "the" steady
    /// state is not defined. Carries the number of zero modes found.
    #[error("steady state is not unique: {count} zero modes")]
    NonUniqueSteadyState { count: usize },

    /// A numerical routine failed to converge or produced a result that
    /// fails its own sanity check.
    #[error("numerical failure in {context}: {reason}")]
    Numerical { context: String, reason: String },

    /// Output could not be written.
    #[error("cannot write output {path}: {source}")]
    OutputWrite {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    /// Process exit code for this error: config problems exit 2, runtime
    /// failures exit 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::ConfigRead { .. }
            | SimError::ConfigParse { .. }
            | SimError::InvalidField { .. } => 2,
            SimError::InvalidInput { .. }
            | SimError::NonUniqueSteadyState { .. }
            | SimError::Numerical { .. }
            | SimError::OutputWrite { .. } => 3,
        }
    }
}
