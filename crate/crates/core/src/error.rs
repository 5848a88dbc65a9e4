use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unaddressable context: state key not in the enumerated tabular space ({0})")]
    UnaddressableContext(String),

    #[error("rationale space too large: {size} sequences exceeds the enumeration bound {bound}")]
    SpaceTooLarge { size: f64, bound: f64 },

    #[error("answer unreachable: marginal likelihood is zero for this instance")]
    AnswerUnreachable,

    #[error("absolute-continuity violated: estimated posterior assigns zero mass to a supported rationale")]
    AbsoluteContinuity,

    #[error("unsampleable candidate: forward probability is zero for token {0}")]
    UnsampleableCandidate(usize),

    #[error("no valid rationales for this query")]
    NoValidRationales,

    #[error("empty filtered set: no positively rewarded rationales")]
    EmptyFilteredSet,

    #[error("group of size {0} is too small for a leave-one-out baseline")]
    GroupTooSmall(usize),

    #[error("instance has no golden rationale")]
    MissingGolden,

    #[error("non-finite loss encountered during finite differencing")]
    NonFiniteLoss,

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}
