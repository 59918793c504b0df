use thiserror::Error;

/// Errors surfaced by dataset generation, the blending pipeline, the network
/// core, and the analyses.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("latent length mismatch: expected {expected}, got {got}")]
    LatentLength { expected: usize, got: usize },
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("candidate pool contains anchor identity {0}")]
    IdentityCollision(u32),
    #[error("candidate pool too small: need {need}, have {have}")]
    InsufficientPool { need: usize, have: usize },
    #[error("color statistics region too small: {0} pixels (minimum 16)")]
    DegenerateRegion(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("identity {0} has fewer than 2 images")]
    TooFewImages(u32),
    #[error("dataset/config mismatch: {0}")]
    DatasetMismatch(String),
    #[error("empty verification fold")]
    EmptyFold,
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
