use thiserror::Error;

/// Errors shared by all modules of the crate.
///
/// `NoDichotomy` is a verdict, not a failure of the machinery: it is returned
/// when no envelope with a positive decay rate fits the sampled data.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("grid must contain at least two nodes")]
    DegenerateGrid,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grids do not match: {0}")]
    GridMismatch(String),
    #[error("time {0} is not a node of the grid")]
    NotOnGrid(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("backward evaluation requested on a coefficient flow (t = {t} < s = {s})")]
    BackwardEvaluation { t: f64, s: f64 },
    #[error("restriction of the flow to the unstable bundle is numerically singular (cond > {cond:.3e})")]
    SingularRestriction { cond: f64 },
    #[error("no dichotomy: no envelope with positive exponent fits the samples (best rate {best_rate:.3e})")]
    NoDichotomy { best_rate: f64 },
    #[error("empty sample set")]
    EmptySamples,
    #[error("{0}")]
    Domain(String),
    #[error("divergent tail: declared growth rate {rate} is not below the kernel rate {kernel_rate}")]
    DivergentTail { rate: f64, kernel_rate: f64 },
    #[error("smallness condition violated: K(theta + tail) = {k_theta:.6} >= 1")]
    SmallnessViolated { k_theta: f64 },
    #[error("iteration did not converge within {max_iter} sweeps (last delta {last_delta:.3e})")]
    NonConvergence { max_iter: usize, last_delta: f64 },
    #[error("projection family is not idempotent (residual {residual:.3e})")]
    NotAProjection { residual: f64 },
    #[error("projection rank is not constant across the grid")]
    RankNotConstant,
}

pub type Result<T> = std::result::Result<T, Error>;
