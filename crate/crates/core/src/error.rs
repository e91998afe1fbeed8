use std::fmt;

use crate::corpus::PassageId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage a provider or stage error originated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Retrieve,
    Rerank,
    Extract,
    Generate,
    Fuse,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Retrieve => "retrieve",
            Stage::Rerank => "rerank",
            Stage::Extract => "extractive reader",
            Stage::Generate => "generative reader",
            Stage::Fuse => "fusion",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate passage id {0}")]
    DuplicateId(PassageId),

    #[error("unknown passage id {0}")]
    UnknownId(PassageId),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("not enough passages: {0}")]
    Capacity(String),

    #[error("NaN value where a number was required")]
    NaN,

    #[error("value {0} overflows binary16")]
    Overflow(f32),

    #[error("missing score: {0}")]
    MissingScore(String),

    #[error("example should have been filtered out: {0}")]
    ShouldHaveBeenFiltered(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{stage} stage: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_stage(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Error {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
