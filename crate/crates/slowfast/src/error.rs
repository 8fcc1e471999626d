use thiserror::Error;

/// Errors reported by the simulation and averaging machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive semidefinite: min eigenvalue {min_eigenvalue:.3e}")]
    NotPsd { min_eigenvalue: f64 },

    #[error("matrix is not Hermitian: max asymmetry {max_asymmetry:.3e}")]
    NotHermitian { max_asymmetry: f64 },

    #[error("quadrature rule too large: {nodes} nodes exceeds limit {limit}")]
    QuadratureTooLarge { nodes: usize, limit: usize },

    #[error("perturbation does not split as P1 + hamiltonian field: residual {residual:.3e}")]
    SplitResidual { residual: f64 },

    #[error("no snapshot recorded at tau = {tau}")]
    UnknownSnapshot { tau: f64 },

    #[error("unknown model kind '{0}'")]
    UnknownModel(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
