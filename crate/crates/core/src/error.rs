use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("no route defined for OD {origin} -> {destination}")]
    UnroutableOd { origin: String, destination: String },

    #[error("segment {segment}: no train satisfies the spatio-temporal constraints")]
    EmptyCandidateSet { segment: usize },

    #[error(
        "no observable records (every record has an ambiguous segment); \
         loosen the minimum access/egress constraints or add data"
    )]
    NoObservableData,

    #[error("no itinerary could be joined with the ground truth")]
    EmptyEvaluation,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("internal consistency failure: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Scenario(_) => 1,
            Error::Internal(_) => 3,
            _ => 2,
        }
    }
}
