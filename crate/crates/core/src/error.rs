use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),

    #[error("cannot split height {height} into {parts} parts")]
    PartsExceedHeight { parts: usize, height: usize },

    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("brute-force path enumeration limited to h <= {max}, got {h}")]
    TooLarge { h: usize, max: usize },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("all BN scale factors are zero")]
    DegenerateGamma,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("need at least two identities, got {0}")]
    NeedTwoIdentities(usize),

    #[error("identity {identity} has {available} {modality} samples, need {needed}")]
    InsufficientSamples {
        identity: usize,
        modality: &'static str,
        available: usize,
        needed: usize,
    },

    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),

    #[error("query {0} has no true match in the gallery")]
    NoMatchForQuery(usize),

    #[error("re-ranking needs at least two items, neighborhood is empty")]
    EmptyNeighborhood,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
