use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("frequency {omega} rad/s is a pole of the analog system")]
    Pole { omega: f64 },

    #[error("root not bracketed on [{lo}, {hi}]")]
    NotBracketed { lo: f64, hi: f64 },

    #[error("Riccati iteration did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("Riccati solution is not positive semidefinite (min eigenvalue {min_eig:e})")]
    Indefinite { min_eig: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("eigenvector matrix is ill-conditioned (condition number {cond:e})")]
    IllConditioned { cond: f64 },

    #[error("simulated duration is not an integer number of clock periods")]
    NonIntegerDuration,

    #[error("state {stage} reached {value:e}, beyond 10 times the bound: runaway instability at period {period}")]
    Runaway { stage: usize, value: f64, period: usize },

    #[error("stability not guaranteed for stages {0:?}; set the override flag to simulate anyway")]
    NotStable(Vec<usize>),

    #[error("clock period {t} s is not an integer multiple of the estimate period {t_u} s")]
    PeriodMismatch { t: f64, t_u: f64 },

    #[error("empty control trace")]
    EmptyTrace,

    #[error("lookup table path requires binary controls")]
    NonBinaryControls,

    #[error("parallel estimate has an imaginary residue of {ratio:e} relative to its magnitude")]
    ImaginaryResidue { ratio: f64 },

    #[error("too few samples: {got} available, {need} required")]
    TooFewSamples { got: usize, need: usize },

    #[error("no detectable tone in band")]
    NoTone,

    #[error("oracle covariance recursion diverged: {0}")]
    OracleDiverged(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
