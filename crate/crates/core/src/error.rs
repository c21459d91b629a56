use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{0}")]
    InvalidShape(String),
    #[error("extent {extent} on axis {axis} is not a power of two")]
    NotPowerOfTwo { axis: usize, extent: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("selective scan step size must be positive, found {0} at {1}")]
    NonPositiveStep(f64, usize),
    #[error("imaginary residue {0:e} after inverse transform of a conjugate-symmetric spectrum")]
    ImaginaryResidue(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable code used by the CLI's `error: <code>: <message>` line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidShape(_) => "shape",
            Error::NotPowerOfTwo { .. } => "extent",
            Error::NonScalarLoss(_) => "loss",
            Error::NonPositiveStep(..) => "scan",
            Error::ImaginaryResidue(_) => "fft",
            Error::Config(_) => "config",
            Error::LabelOutOfRange { .. } => "labels",
            Error::MissingGrad(_) => "grad",
            Error::NonFiniteLoss { .. } => "nan",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
