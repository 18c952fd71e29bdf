use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric: |a[{row}][{col}] - a[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotSpd { pivot: usize, value: f64 },

    #[error("Jacobi eigenvalue iteration did not converge in {sweeps} sweeps (off-diagonal norm {off:e})")]
    ConvergenceFailure { sweeps: usize, off: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unsupported dimensions: {0}")]
    UnsupportedDims(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("all importance weights are zero or not finite")]
    DegenerateWeights,

    #[error("relative density is not finite at a sampled point")]
    NonFiniteRelativeDensity,

    #[error("quadrature grid too coarse: refined value {fine} differs from {coarse} by more than {tolerance:e}")]
    GridTooCoarse {
        coarse: f64,
        fine: f64,
        tolerance: f64,
    },

    #[error("numerical integration failed: {0}")]
    IntegrationFailure(String),

    #[error("no oracle available: {0}")]
    NoOracle(String),

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("config validation error: {0}")]
    Validation(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
