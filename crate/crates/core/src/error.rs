use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector norm is zero")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("descriptor is not unit length (norm {norm})")]
    NotNormalized { norm: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("at least 2 samples are required, got {0}")]
    InsufficientData(usize),
    #[error("sample covariance is degenerate")]
    DegenerateCovariance,
    #[error("at least 2 classes are required, got {0}")]
    InsufficientClasses(usize),
    #[error("no class has 2 or more samples to form a positive pair")]
    InsufficientPositives,
    #[error("warped quad is degenerate")]
    DegenerateQuad,
    #[error("stamped region falls out of frame (visible area {area:.1} px²)")]
    OutOfFrame { area: f64 },
    #[error("crop does not intersect the image")]
    EmptyCrop,
    #[error("no ground-truth positives")]
    NoPositives,
    #[error("query set is empty")]
    EmptyQuerySet,
    #[error("no input found: {0}")]
    EmptyInput(String),
    #[error("no precomputed feature map for image {image} bbox {bbox:?}")]
    MissingFeatureMap { image: String, bbox: [f64; 4] },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CorruptPayload { stored: u32, computed: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
