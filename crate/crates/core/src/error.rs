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

    #[error("manifest {path}: {malformed} of {total} rows malformed (first: {first_reason})")]
    ManifestTooBroken {
        path: PathBuf,
        malformed: usize,
        total: usize,
        first_reason: String,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("record rejected: {0}")]
    RecordRejected(String),

    #[error("no active records with image bytes")]
    NoActiveRecords,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown review item {0}")]
    UnknownItem(String),

    #[error("review item {0} already decided")]
    AlreadyDecided(String),

    #[error("malformed decision payload for {item_id}: {reason}")]
    MalformedPayload { item_id: String, reason: String },

    #[error("record {record_id} is {status} and cannot accept this decision")]
    RecordNotActive { record_id: String, status: String },

    #[error("unknown record {0}")]
    UnknownRecord(String),

    #[error("unknown icon class {0:?}")]
    UnknownClass(String),

    #[error("class {0} has no training images")]
    EmptyClass(String),

    #[error("pretrained backbone weights are required: {0}")]
    MissingPretrained(String),

    #[error("weights do not match the architecture: {0}")]
    WeightMismatch(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged {
        epoch: usize,
        last_good: Box<crate::model::TrainedModel>,
    },

    #[error("model has not been trained")]
    UntrainedModel,

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("image decode failed: {0}")]
    Image(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("detector failed: {0}")]
    Detector(String),

    #[error("corrupt store {path}: line {line}: {reason}")]
    CorruptStore {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
