//! Error type shared by every pipeline stage.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // dataset
    #[error("specimen {specimen_id} lacks magnification {missing}")]
    MissingMagnification { specimen_id: String, missing: String },
    #[error("no complete specimens found under {0}")]
    EmptyDataset(PathBuf),
    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("class balance must lie strictly inside (0, 1), got {0}")]
    InvalidBalance(f64),
    #[error("patch size {size} exceeds image dimensions {width}x{height}")]
    PatchTooLarge { size: u32, width: u32, height: u32 },
    #[error("class {class} has {patients} patients, need at least {k}")]
    TooFewPatients { class: usize, patients: usize, k: usize },
    #[error("label fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),

    // sampler
    #[error("specimen {0} does not hold all four magnifications")]
    IncompleteSample(String),
    #[error("invalid pair strategy: {0}")]
    InvalidStrategy(String),

    // transforms
    #[error("degenerate image: {0}")]
    DegenerateImage(String),

    // model
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("unknown encoder {0:?}")]
    UnknownEncoder(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    // loss
    #[error("zero-norm embedding at row {0}")]
    ZeroVector(usize),
    #[error("degenerate contrastive batch: {0}")]
    DegenerateBatch(String),

    // train
    #[error("representation collapse: embedding std {std:.3e} below threshold for {epochs} consecutive epochs")]
    CollapseDetected { std: f64, epochs: usize },
    #[error("labeled subset is empty: {0}")]
    EmptyLabelSubset(String),
    #[error("invalid configuration: {0}")]
    Config(String),

    // eval
    #[error("no predictions to evaluate")]
    EmptyPredictions,
    #[error("majority vote over zero patches")]
    NoPatches,
    #[error("cross-magnification matrix lacks entry train={train} eval={eval}")]
    IncompleteMatrix { train: u32, eval: u32 },

    // report
    #[error("layer {0:?} not found")]
    LayerNotFound(String),
    #[error("layer {0:?} has no spatial extent")]
    NonSpatialLayer(String),
    #[error("reports do not share a schema: {0}")]
    SchemaMismatch(String),

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Configuration problems map to exit code 2 on the command line.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidBalance(_)
                | Error::FractionOutOfRange(_)
                | Error::InvalidStrategy(_)
                | Error::UnknownEncoder(_)
        )
    }
}
