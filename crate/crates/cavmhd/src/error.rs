use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum CavError {
    #[error("invalid resolution: {0}")]
    InvalidResolution(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("parity mismatch: {0}")]
    ParityMismatch(String),

    #[error("density positivity violated: min nodal value {min:.6e} below floor {floor:.6e}")]
    Positivity { min: f64, floor: f64 },

    #[error("nonpositive density node in pressure evaluation: {0:.6e}")]
    NonpositivePressure(f64),

    #[error("{solver} did not converge: residual {residual:.3e} after {iters} iterations")]
    SolverDiverged {
        solver: &'static str,
        residual: f64,
        iters: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("need at least {need} snapshots, got {got}")]
    TooFewSnapshots { need: usize, got: usize },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("step aborted after {rejections} consecutive positivity rejections at t = {t:.6}")]
    StepAborted { rejections: usize, t: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CavError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CavError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CavError>;
