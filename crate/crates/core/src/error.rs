use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: record {index} of {declared} extends past end of data")]
    Truncated { index: u64, declared: u64 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown label id {0}")]
    UnknownLabel(u32),

    #[error("duplicate label id {0} in label table")]
    DuplicateLabel(u32),

    #[error("concept {0} has no positive samples")]
    EmptyConcept(u32),

    #[error("empty sample pool: {0}")]
    EmptyPool(&'static str),

    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("degenerate direction: positive support features average to zero")]
    DegenerateDirection,

    #[error("F1 is undefined without positive labels")]
    UndefinedF1,

    #[error("training diverged in round {round}, epoch {epoch}")]
    TrainingFailure { round: usize, epoch: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("both classes must be present (positives {positives}, negatives {negatives})")]
    ClassAbsent { positives: u64, negatives: u64 },

    #[error("infeasible trial: {0}")]
    InfeasibleTrial(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the input data rather than the configuration.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}
