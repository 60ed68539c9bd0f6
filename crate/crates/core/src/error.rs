use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("{op} domain error at element {index}: operand {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("factor {column} is degenerate: standard deviation {std:e} below guard")]
    DegenerateFactor { column: usize, std: f64 },

    #[error("factor {factor} has a flat density (derivative mass {mass:e})")]
    DegenerateDensity { factor: usize, mass: f64 },

    #[error("conditional derivative for pair ({i}|{j}) at conditioning value {m} is flat (mass {mass:e})")]
    DegenerateConditional { i: usize, j: usize, m: usize, mass: f64 },

    #[error("conditioning value {m} has density {density:e} under the batch marginal")]
    ConditioningValue { m: usize, density: f64 },

    #[error("non-finite value in {context} at coordinate {coordinate}")]
    NonFinite { context: String, coordinate: usize },

    #[error("numerical abort at epoch {epoch} (last good epoch: {last_good:?}): {reason}")]
    NumericalAbort {
        epoch: usize,
        last_good: Option<usize>,
        reason: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid grid density spec: {0}")]
    Spec(String),

    #[error("sample {row} factor {factor} = {value} lies outside the support")]
    OutsideSupport { row: usize, factor: usize, value: f64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("{d} factors exceeds the exhaustive search bound of {max}")]
    TooManyFactors { d: usize, max: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by the numbers rather than by the inputs' structure.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NumericalAbort { .. }
                | Error::DegenerateFactor { .. }
                | Error::DegenerateDensity { .. }
                | Error::DegenerateConditional { .. }
                | Error::ConditioningValue { .. }
        )
    }
}
