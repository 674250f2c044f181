use thiserror::Error;

/// Errors raised by the solvers, oracles and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("lower-level solve did not converge (best KKT residual {best_residual:.3e})")]
    NonConvergence { best_residual: f64 },

    #[error("degenerate active set: row {row} has |h| = {h:.3e} and lambda = {lambda:.3e}")]
    DegenerateActiveSet { row: usize, h: f64, lambda: f64 },

    #[error("SPD divergence: reduce steps (residual {residual:.3e}, initial {initial:.3e})")]
    SpdDivergence { residual: f64, initial: f64 },

    #[error("LICQ violation suspected: {rows} near-active rows have rank {rank}")]
    LicqViolation { rows: usize, rank: usize },

    #[error("alpha too large for strong convexity (smallest y-Hessian eigenvalue {lambda_min:.3e})")]
    NonConvexPenalty { lambda_min: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no methods selected")]
    NoMethods,

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
