use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape in {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("constant channel: standard deviation is zero")]
    ConstantChannel,

    #[error("undefined correlation: constant input")]
    UndefinedCorrelation,

    #[error("non-real reconstruction: imaginary residue {0:e}")]
    NonRealReconstruction(f64),

    #[error("CFE requires at least two modalities")]
    CfeNeedsModalities,

    #[error("isolated node {0} in adjacency without self-loops")]
    IsolatedNode(usize),

    #[error("singular linear system")]
    Singular,

    #[error("batch-norm in training mode needs a batch of at least 2")]
    BatchTooSmall,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("overlapping injections on node {node}, modality {modality}")]
    OverlappingInjection { node: usize, modality: usize },

    #[error("unknown {kind} `{name}`")]
    UnknownEntry { kind: &'static str, name: String },

    #[error("duplicate {kind} `{name}`")]
    DuplicateEntry { kind: &'static str, name: String },

    #[error("parse error at {path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
