use thiserror::Error;

pub type Result<T> = std::result::Result<T, QuantError>;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("clip range upper ({upper}) must exceed lower ({lower})")]
    NonPositiveRange { lower: f32, upper: f32 },
    #[error("clip range ({lower}, {upper}) collapses to zero width in f32")]
    DegenerateRange { lower: f32, upper: f32 },
    #[error("unsupported bit-width {0}: expected 2..=8 or 32")]
    InvalidBits(u32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in tensor at flat index {0}")]
    NonFinite(usize),
    #[error("observer received an empty tensor")]
    EmptyTensor,
    #[error("percentile keep fraction {0} outside (0, 1]")]
    InvalidKeep(f64),
    #[error("MSE grid needs at least 2 steps, got {0}")]
    InvalidGridSteps(usize),
    #[error("invalid histogram domain ({lower}, {upper})")]
    InvalidDomain { lower: f32, upper: f32 },
    #[error("histogram holds no observations")]
    DegenerateHistogram,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("graph contains a cycle")]
    CyclicGraph,
    #[error("missing weights for node {0}")]
    MissingWeight(String),
    #[error("calibration set is empty")]
    EmptyCalibrationSet,
    #[error("evaluation set is empty")]
    EmptyEvaluationSet,
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
