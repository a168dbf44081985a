//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RaeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed raster: {0}")]
    MalformedRaster(String),

    #[error("missing metadata sidecar: {0}")]
    MissingMetadata(String),

    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),

    #[error("point ({0}, {1}) outside interpolation domain")]
    OutsideDomain(f64, f64),

    #[error("fragment fully outside template")]
    FragmentOutside,

    #[error("image smaller than one fragment")]
    ImageTooSmall,

    #[error("rank-deficient corner configuration")]
    DegenerateCorners,

    #[error("non-positive determinant: {0}")]
    NonPositiveDeterminant(f64),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("texture estimation ill-posed: {0}")]
    IllPosedTexture(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("unbounded CRLB: {0}")]
    UnboundedCrlb(String),

    #[error("M-step failure: {0}")]
    MStepFailure(String),

    #[error("degenerate neighborhood: condition number {0:.3e}")]
    DegenerateNeighborhood(f64),

    #[error("no valid starts")]
    NoValidStarts,

    #[error("not enough validated fragments: have {have}, need {need}")]
    NotEnoughFragments { have: usize, need: usize },

    #[error("rank deficiency in final fit")]
    RankDeficient,

    #[error("registration failed: {0}")]
    RegistrationFailed(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
