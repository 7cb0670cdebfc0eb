use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CdbnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CdbnError {
    #[error("unknown sample id `{0}`")]
    UnknownSample(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("failed to decode sample `{id}`: {reason}")]
    DecodeError { id: String, reason: String },

    #[error("token sequence of length {len} exceeds encoder maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("text embedding has zero norm and cannot be normalized")]
    DegenerateEmbedding,

    #[error("zero-norm feature row {row} in {what}")]
    ZeroNormFeature { what: &'static str, row: usize },

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("loss diverged (non-finite value {0}) during source training")]
    DivergedLoss(f64),

    #[error("record list is empty")]
    EmptyRecordList,

    #[error("non-finite loss component `{component}` = {value}")]
    NonFiniteLoss { component: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("domains disagree on the class set: `{domain}` has {found:?}, expected {expected:?}")]
    ClassMismatchAcrossDomains {
        domain: String,
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("domain `{0}` contains no samples")]
    EmptyDomain(String),

    #[error("degenerate synthetic task: {0}")]
    DegenerateSpec(String),

    #[error("content hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("encoder backend `{0}` is not available in this build")]
    BackendUnavailable(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CdbnError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        CdbnError::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        CdbnError::Malformed {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
