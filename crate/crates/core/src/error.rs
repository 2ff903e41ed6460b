use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("image id `{id}` appears in the tags file but not in the features file")]
    Referential { id: String },

    #[error("split `{split}` received zero records")]
    DegenerateSplit { split: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{missing} vocabulary tokens have no pretrained vector (first: `{first}`)")]
    Coverage { missing: usize, first: String },

    #[error("non-finite value in {0}")]
    Numerical(String),

    #[error("negative sampling exhausted: every id with positive mass is excluded")]
    Exhausted,

    #[error("query vector has zero norm")]
    DegenerateQuery,

    #[error("no query token is in the vocabulary: {}", .0.join(", "))]
    UnknownQuery(Vec<String>),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    CheckpointCorrupt(String),

    #[error("{}: not found", .0.display())]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn dimension(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            found,
        }
    }
}
