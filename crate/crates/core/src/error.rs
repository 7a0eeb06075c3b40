use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SphsError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("non-finite {what} at x = {x:?}")]
    NonFinite { what: String, x: Vec<f64> },

    #[error("driver binding: {0}")]
    Binding(String),

    #[error("dirac structure: {0}")]
    Dirac(String),

    #[error("system is not affine: {0}")]
    Nonlinear(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl SphsError {
    pub(crate) fn dim(what: impl Into<String>, expected: usize, found: usize) -> Self {
        SphsError::Dimension {
            what: what.into(),
            expected,
            found,
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        SphsError::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn non_finite(what: impl Into<String>, x: &nalgebra::DVector<f64>) -> Self {
        SphsError::NonFinite {
            what: what.into(),
            x: x.iter().copied().collect(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SphsError>;
