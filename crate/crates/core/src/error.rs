use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown category `{name}`{}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    UnknownCategory { name: String, line: Option<usize> },

    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("split contamination at line {line}: real training record carries unseen label `{category}`")]
    SplitContamination { line: usize, category: String },

    #[error("label space mismatch between merged datasets")]
    LabelSpaceMismatch,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),

    #[error("backend timed out after {0:.1}s")]
    BackendTimeout(f64),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("unsupported resolution {requested} (supported: {supported:?})")]
    UnsupportedResolution { requested: u32, supported: Vec<u32> },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("index {index} out of range for {len} categories")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("duplicate positive index {0}")]
    DuplicateIndex(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("need at least {needed} categories, have {available}")]
    TooFewCategories { needed: usize, available: usize },

    #[error("only {got} of {wanted} prompts survived the containment check for {categories:?}")]
    InsufficientValidPrompts {
        categories: Vec<String>,
        wanted: usize,
        got: usize,
    },

    #[error("backend does not expose a text-encoder gradient path")]
    NonDifferentiableBackend,

    #[error("loss became non-finite at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("attempt budget of {budget} exhausted; deficits: {deficits:?}")]
    AttemptBudgetExhausted {
        budget: usize,
        deficits: Vec<(String, usize)>,
        ledger: Box<crate::builder::GenerationLedger>,
    },

    #[error("no prompts available for category tuple {0:?}")]
    MissingPrompts(Vec<String>),

    #[error("image error: {0}")]
    Image(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("yaml error: {0}")]
    Yaml(#[from] serde_yaml::Error),

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },

    #[error("run is incomplete: {0}")]
    IncompleteRun(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
