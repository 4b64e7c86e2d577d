use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"RFNV1\\n\"")]
    BadMagic,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("trailing bytes after payload: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("invalid label code {code} at voxel {index}")]
    InvalidLabelCode { code: u8, index: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("weights must sum to 1 (got {0})")]
    WeightsNotNormalized(f64),

    #[error("AROC undefined: truth contains {positives} positives and {negatives} negatives")]
    ArocUndefined { positives: usize, negatives: usize },

    #[error("unresolved labels: {0} voxels still carry code 255")]
    UnresolvedLabels(usize),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("resolution rejected: {0}")]
    Resolution(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("png encoding failed: {0}")]
    Png(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
