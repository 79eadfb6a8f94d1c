use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty log")]
    EmptyLog,

    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },

    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),

    #[error("line {line}: unparsable timestamp `{value}`")]
    Timestamp { line: u64, value: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite generator output")]
    NonFiniteOutput,

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("empty Poisson batch: skip step")]
    EmptyBatch,

    #[error("non-private: noise multiplier zero")]
    ZeroNoise,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible target: {0}")]
    Infeasible(String),

    #[error("budget exhausted: total delta {0} >= 1")]
    BudgetExhausted(f64),

    #[error("training diverged: reduce η or raise Φ")]
    Diverged,

    #[error("unbalanced network: supply {supply} != demand {demand}")]
    Unbalanced { supply: i64, demand: i64 },

    #[error("unknown loss `{0}`")]
    UnknownLoss(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
