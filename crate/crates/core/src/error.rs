//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CamaError>;

#[derive(Debug, Error)]
pub enum CamaError {
    #[error("empty support")]
    EmptySupport,

    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("invalid percentage: {0}")]
    InvalidPercentage(f64),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("malformed element {0}: answer span is empty")]
    MalformedElement(usize),

    #[error("element {0} does not exist")]
    NoSuchElement(usize),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid task spec: {0}")]
    InvalidSpec(String),

    #[error("invalid model dims: {0}")]
    InvalidDims(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dims mismatch: {0}")]
    DimsMismatch(String),

    #[error("missing ground truth")]
    MissingGroundTruth,

    #[error("position {position} out of range for {shots} shots")]
    PositionOutOfRange { position: usize, shots: usize },

    #[error("bias plan references layer {layer} but the model has {n_layers} layers")]
    PlanLayerOutOfRange { layer: usize, n_layers: usize },

    #[error("invalid bias entry: {0}")]
    InvalidBias(String),

    #[error("numeric blow-up at layer {0}")]
    NumericBlowUp(usize),

    #[error("steps must be ≥1")]
    ZeroSteps,

    #[error("loss target out of range: {0}")]
    TargetOutOfRange(String),

    #[error("non-causal anchor: token {anchor} does not follow image span of element {element}")]
    NonCausalAnchor { anchor: usize, element: usize },

    #[error("no answer-directed saliency")]
    NoAnswerSaliency,

    #[error("no generated tokens in trace")]
    NoGeneratedTokens,

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("blob length mismatch in {path}: expected {expected} bytes, found {found}")]
    BlobLengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("inconsistent manifest: {0}")]
    InconsistentManifest(String),

    #[error("non-finite value in {0}")]
    NonFiniteValue(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CamaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CamaError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            CamaError::NonFiniteLogits | CamaError::NumericBlowUp(_) | CamaError::NoAnswerSaliency
        )
    }
}
