use std::path::PathBuf;

use crate::schema::LandmarkGroup;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("landmark index {0} is out of range (expected 0..60)")]
    IndexOutOfRange(usize),

    #[error("landmark group {0:?} is incomplete")]
    IncompleteGroup(LandmarkGroup),

    #[error("landmark set is incomplete: {missing} of 60 landmarks absent")]
    IncompleteSet { missing: usize },

    #[error("cannot complete landmarks, missing prerequisite groups: {0:?}")]
    Uncompletable(Vec<LandmarkGroup>),

    #[error("eyebrow completion expects exactly one eyebrow present on the opposite side")]
    EyebrowArity,

    #[error("transform fit failed: {0}")]
    Fit(&'static str),

    #[error("zero chin distance, cannot normalize error")]
    ZeroChinDistance,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at stage {stage}, epoch {epoch}: loss is {loss}")]
    Diverged { stage: usize, epoch: usize, loss: f64 },

    #[error("missing artifact {path}; run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
