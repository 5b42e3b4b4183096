use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument outside the operation's domain.
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("duplicate document id `{0}`")]
    DuplicateDoc(String),

    #[error("bad magic bytes: expected `{expected}`")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(
        "split infeasible: largest component holds {largest} of {total} queries, \
         more than the {max_allowed} allowed in the train side"
    )]
    SplitInfeasible { largest: usize, total: usize, max_allowed: usize, component_sizes: Vec<usize> },

    #[error("retriever failed for query `{query}`: {msg}")]
    Retriever { query: String, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
