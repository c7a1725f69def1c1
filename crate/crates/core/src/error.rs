use std::path::PathBuf;

use crate::container::BlockKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to map failures onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input: malformed files, geometry mismatches, invalid parameters.
    Validation,
    /// A budget or soundness assertion fired.
    Budget,
    /// The run aborted before anything became visible.
    Aborted,
    /// The snapshot was published but a later bookkeeping step failed.
    PostPublish,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unsupported dtype {0:?} (only f32 is supported)")]
    UnsupportedDtype(String),

    #[error("integrity mismatch for {what}: expected {expected}, found {actual}")]
    IntegrityMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),

    #[error("block {key} out of range ({blocks} blocks)")]
    BlockOutOfRange { key: BlockKey, blocks: usize },

    #[error("short read on {path}: wanted {wanted} bytes at offset {offset}")]
    ShortRead {
        path: PathBuf,
        offset: u64,
        wanted: usize,
    },

    #[error("block {0} is a base reference but no base checkpoint is attached")]
    UnresolvedReference(BlockKey),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("length mismatch: expected {expected} elements, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("staging writer is closed")]
    WriterClosed,

    #[error("out-of-order write: expected {expected}, got {actual}")]
    OutOfOrderWrite { expected: String, actual: String },

    #[error("unsupported catalog version {0}")]
    CatalogVersion(u32),

    #[error("catalog digest mismatch ({0})")]
    CatalogDigest(String),

    #[error("access unit expert {expert} / {key} is not in the catalog")]
    UnitNotInCatalog { expert: u32, key: BlockKey },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("missing block statistics for expert {expert} / {key}")]
    MissingStats { expert: u32, key: BlockKey },

    #[error("operator {0} is not supported here")]
    UnsupportedOperator(String),

    #[error("expert read budget exceeded: {attempted} bytes requested against a limit of {limit}")]
    BudgetViolation { attempted: u64, limit: u64 },

    #[error("soundness check failed: {0}")]
    Soundness(String),

    #[error("plan does not match its inputs: {0}")]
    PlanMismatch(String),

    #[error("run aborted at {0}")]
    Aborted(String),

    #[error("snapshot {sid} published but post-publish step failed: {reason}")]
    PostPublish { sid: String, reason: String },

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

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::BudgetViolation { .. } | Error::Soundness(_) => ErrorClass::Budget,
            Error::Aborted(_) => ErrorClass::Aborted,
            Error::PostPublish { .. } => ErrorClass::PostPublish,
            _ => ErrorClass::Validation,
        }
    }
}
