use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("index {index} is out of range for level {level}")]
    InvalidInterval { level: u32, index: u64 },

    #[error("the root interval has no parent")]
    RootHasNoParent,

    #[error("grid depth {got} is too coarse, need at least {need}")]
    GridTooCoarse { need: u32, got: u32 },

    #[error("grid depths differ: {0} vs {1}")]
    DepthMismatch(u32, u32),

    #[error("level {level} exceeds the declared maximum {max}")]
    LevelOverflow { level: u32, max: u32 },

    #[error("monte-carlo evaluation needs at least one sample")]
    ZeroSamples,

    #[error("the sigma_00 regime has no square-function surrogate")]
    NoSurrogate,

    #[error("invalid space spec `{0}`")]
    InvalidSpec(String),

    #[error("invalid faithful system: {0}")]
    InvalidSystem(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("variance budget violated ({bound:.3e} > {allowed:.3e}); deepen the target level")]
    VarianceBudget { bound: f64, allowed: f64 },

    #[error("{stage}: no admissible signs after {attempts} draws")]
    RetryExhausted { stage: String, attempts: usize },

    #[error("{stage}: frequency budget {budget} exhausted (needed level {needed})")]
    FrequencyBudgetExhausted { stage: String, needed: u32, budget: u32 },

    #[error("{stage}: level averages do not settle (gap {gap:.4} at level {level})")]
    NonSettling { stage: String, level: u32, gap: f64 },

    #[error("io: {0}")]
    Io(String),

    #[error("json: {0}")]
    Json(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
