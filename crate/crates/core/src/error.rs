use thiserror::Error;

/// Errors produced anywhere in the acquisition / detection stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("cannot build a box from an empty pixel set")]
    EmptyPixelSet,
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid scenario script: {0}")]
    InvalidScript(String),
    #[error("unknown identity {0}")]
    UnknownIdentity(u64),
    #[error("unknown object label `{0}`")]
    UnknownObject(String),
    #[error("insufficient keypoints: {present} present, {required} required")]
    InsufficientKeypoints { present: usize, required: usize },
    #[error("degenerate keypoint layout: all points coincide with the centroid")]
    DegenerateFeature,
    #[error("training data contains a single class")]
    SingleClass,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parameter grid is empty")]
    EmptyGrid,
    #[error("negatives pool exhausted: needed {needed}, {available} left")]
    PoolExhausted { needed: usize, available: usize },
    #[error("background pool is empty")]
    EmptyPool,
    #[error("degenerate region of interest: {0}")]
    DegenerateRoi(String),
    #[error("initial segmentation failed within the first {0} frames")]
    InitialSegmentationFailed(usize),
    #[error("annotation aborted at frame {frame} after {losses} consecutive losses")]
    AnnotationAborted { frame: u32, losses: u32 },
    #[error("frame index mismatch: {0}")]
    IndexMismatch(String),
    #[error("no class with ground truth to evaluate")]
    NoEvaluableClass,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
