use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix exponential overflow (1-norm {norm:.3e}, {squarings} squarings)")]
    ExpmOverflow { norm: f64, squarings: u32 },

    #[error("matrix is not positive semidefinite: minimum eigenvalue estimate {min_eigenvalue:.6e}")]
    Indefinite { min_eigenvalue: f64 },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("RK4 stage k{stage} produced non-finite values")]
    Rk4Divergence { stage: usize },

    #[error("Newton iteration did not converge in {iterations} iterations (residual {residual:.3e})")]
    NewtonFailed { iterations: usize, residual: f64 },

    #[error("steady state not found in {iterations} iterations (residual {residual:.3e})")]
    SteadyState { iterations: usize, residual: f64 },

    #[error("sigma point {index}: {source}")]
    SigmaPoint {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("eigenvalue computation failed")]
    Eigen,

    #[error(
        "truth step {dt:e} s is outside the RK4 stability region (h*lambda = {z_re:.4}{z_im:+.4}i); use a smaller truth_dt"
    )]
    TruthUnstable { dt: f64, z_re: f64, z_im: f64 },

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from a numerical blow-up of the scheme rather
    /// than from bad input or a failed linear algebra kernel.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Rk4Divergence { .. } | Error::NonFinite(_) | Error::ExpmOverflow { .. } => true,
            Error::SigmaPoint { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
