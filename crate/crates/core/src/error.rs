use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MsnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MsnError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("stale feature memory: memory belongs to patch {memory_scope}, forward requested patch {patch_id}")]
    StaleMemory { memory_scope: u64, patch_id: u64 },

    #[error("missing memory entry for gap layer {layer} (patch {patch_id})")]
    MissingMemory { layer: usize, patch_id: u64 },

    #[error("parameter store is not frozen: tensor `{0}` is still trainable")]
    NotFrozen(String),

    #[error("frozen tensors changed: checksum {before} became {after}")]
    FrozenChanged { before: String, after: String },

    #[error("uncovered region: {0}")]
    Uncovered(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("{} already exists; pass --force to overwrite", .0.display())]
    AlreadyExists(PathBuf),

    #[error("{} is locked by another command; remove the lockfile if no command is running", .0.display())]
    Locked(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

impl MsnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            source,
        }
    }
}
