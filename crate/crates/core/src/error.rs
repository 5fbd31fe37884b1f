use thiserror::Error;

/// Everything that can go wrong inside the solver stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("g0 too large: positivity of gbar lost at j = {index}")]
    G0TooLarge { index: usize },

    #[error("gate violated: {0}")]
    Gate(String),

    #[error("assumption {which} violated: {detail}")]
    Assumption { which: &'static str, detail: String },

    #[error("expansivity violated: alpha = {alpha} at j = {index}")]
    Expansivity { alpha: f64, index: usize },

    #[error("non-convergent tail: {0}")]
    NonConvergent(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("model violates its envelope at j = {index}: ratio {ratio}")]
    ModelViolatesA3 { index: usize, ratio: f64 },

    #[error("outside domain at j = {index}, clause {clause}: ratio {ratio}")]
    Domain {
        index: usize,
        clause: &'static str,
        ratio: f64,
    },

    #[error("no contraction after {iterations} iterations (last factor {factor})")]
    NoContraction { iterations: usize, factor: f64 },

    #[error("horizon too short: tail estimate {estimate} above {tol}")]
    ExtendHorizon { estimate: f64, tol: f64 },

    #[error("ball exit at t = {t}, j = {index}, clause {clause}: ratio {ratio}")]
    BallExit {
        t: f64,
        index: usize,
        clause: &'static str,
        ratio: f64,
    },

    #[error("step size underflow at t = {t} (h = {h})")]
    StepFloor { t: f64, h: f64 },

    #[error("newton failed: {0}")]
    Newton(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

impl From<std::io::Error> for FlowError {
    fn from(e: std::io::Error) -> Self {
        FlowError::Io(e.to_string())
    }
}

impl From<csv::Error> for FlowError {
    fn from(e: csv::Error) -> Self {
        FlowError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for FlowError {
    fn from(e: serde_json::Error) -> Self {
        FlowError::Io(e.to_string())
    }
}
