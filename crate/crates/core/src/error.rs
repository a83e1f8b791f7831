use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("coefficient `{field}` is not finite at (t = {t}, y = {y})")]
    ModelEvaluation { field: &'static str, t: f64, y: f64 },

    #[error(
        "boundary instability: {interventions} clamped steps out of {steps} ({rate:.3}% > 1%); reduce the time step"
    )]
    BoundaryInstability {
        interventions: u64,
        steps: u64,
        rate: f64,
    },

    #[error("degenerate scaling: time-averaged limit volatility is {0} at the requested horizon")]
    DegenerateScaling(f64),

    #[error("moment of order {p} overflowed; use a smaller order")]
    MomentOverflow { p: f64 },

    #[error("exponent overflow: Z_t - Z_s = {0} exceeds 700; the model likely violates its assumptions")]
    ExponentOverflow(f64),

    #[error("empty sample")]
    EmptySample,

    #[error("invalid sample: entry {index} is {value}")]
    InvalidSample { index: usize, value: f64 },

    #[error("insufficient sample: need at least {needed} values, got {got}")]
    InsufficientSample { needed: usize, got: usize },

    #[error("degenerate bandwidth: sample has no spread")]
    DegenerateBandwidth,

    #[error("distance at horizon {t} is zero; increase the number of paths or drop that horizon")]
    LogDomain { t: f64 },

    #[error("insufficient probe grid: {nodes} nodes (need at least 100)")]
    InsufficientProbe { nodes: usize },

    #[error("matrix is not symmetric positive definite")]
    Decomposition,

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("unknown model `{0}` (expected constant, perturbed, hyperbolic)")]
    UnknownModel(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{message} (partial results manifest: {manifest})")]
    Aborted { message: String, manifest: PathBuf },
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}
