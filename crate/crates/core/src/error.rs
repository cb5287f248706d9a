//! Error taxonomy shared by every module in the crate.
//!
//! All fallible public APIs return [`Result`]. The variants are coarse on
//! purpose: callers branch on *kind* (bad input vs. broken file vs. internal
//! numerical trouble), while the embedded message carries the specifics.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A request exceeded a hard capacity limit (e.g. factorial-sized state
    /// spaces beyond what dense matrices can hold).
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Conditioning information was mutually contradictory, e.g. a posterior
    /// was requested for an observation that has probability zero under the
    /// forward process.
    #[error("inconsistent evidence: {0}")]
    InconsistentEvidence(String),

    /// A numerical guard tripped (normalization drift, non-finite values).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Two categorical distributions that must share a support did not.
    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    /// A data file failed structural validation; `line` is 1-based and
    /// includes the header row so it matches what editors display.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A data set violated a cross-record invariant (duplicate keys,
    /// inconsistent list lengths, labels outside {0,1}).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A checkpoint or config file could not be used.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short stable identifier for the error class, used by the CLI and the
    /// C ABI layer to map errors onto exit/status codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::InvalidArgument,
            Error::Capacity(_) => ErrorKind::Capacity,
            Error::InconsistentEvidence(_) => ErrorKind::InconsistentEvidence,
            Error::Numerical(_) => ErrorKind::Numerical,
            Error::SupportMismatch(_) => ErrorKind::SupportMismatch,
            Error::Parse { .. } => ErrorKind::Parse,
            Error::Integrity(_) => ErrorKind::Integrity,
            Error::Checkpoint(_) => ErrorKind::Checkpoint,
            Error::Io(_) => ErrorKind::Io,
        }
    }
}

/// Discriminant-only view of [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// See [`Error::InvalidArgument`].
    InvalidArgument,
    /// See [`Error::Capacity`].
    Capacity,
    /// See [`Error::InconsistentEvidence`].
    InconsistentEvidence,
    /// See [`Error::Numerical`].
    Numerical,
    /// See [`Error::SupportMismatch`].
    SupportMismatch,
    /// See [`Error::Parse`].
    Parse,
    /// See [`Error::Integrity`].
    Integrity,
    /// See [`Error::Checkpoint`].
    Checkpoint,
    /// See [`Error::Io`].
    Io,
}
