use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("svd did not converge after {sweeps} sweeps (residual {residual:e})")]
    Convergence { sweeps: usize, residual: f64 },

    /// `index` is the 1-based position of the singular value in descending order.
    #[error("degenerate sample block: singular value {index} is {value:e}, at or below floor {floor:e}")]
    DegenerateSample { index: usize, value: f64, floor: f64 },

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numeric failures as opposed to usage, shape or I/O problems.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Convergence { .. } | Error::DegenerateSample { .. } | Error::NonFinite(_)
        )
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
