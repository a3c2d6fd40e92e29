use thiserror::Error;

/// Errors raised by the loci library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("escaped before t_end: last valid time {t_last}")]
    Escaped { t_last: f64 },

    #[error("beyond maximal time: flow stops at {t_last}, requested {t_requested}")]
    BeyondMaximalTime { t_last: f64, t_requested: f64 },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("source not admissible here: {0}")]
    SourceNotAdmissible(String),

    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),

    #[error("insufficient field density: widest gap {gap:e} between rays {ray_a} and {ray_b} exceeds capture radius {radius:e}")]
    InsufficientDensity {
        gap: f64,
        ray_a: usize,
        ray_b: usize,
        radius: f64,
    },

    #[error("frame propagation failed at t = {t}: {reason}")]
    Propagation { t: f64, reason: String },

    #[error("no admissible sample pair within radius {0}")]
    NoAdmissiblePair(f64),

    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("no conjugate time up to the horizon for directions {0:?}")]
    MissingConjugate(Vec<usize>),

    #[error("set is not star-shaped about the given center: {0}")]
    NotStarShaped(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
