use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A precondition on shapes or values was not met by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("eigenvalue iteration did not converge for a {rows}x{cols} matrix")]
    NoConvergence { rows: usize, cols: usize },

    /// A token collapsed toward the origin during integration; the step is too large.
    #[error("degenerate state: token {token} has norm {norm:e}")]
    Degenerate { token: usize, norm: f64 },

    #[error("state is not an equilibrium (residual {residual:e} >= tolerance {tol:e})")]
    NotEquilibrium { residual: f64, tol: f64 },

    #[error("certificate unavailable: {0}")]
    CertificateUnavailable(String),

    #[error("instance generation failed after {attempts} attempts")]
    Generation { attempts: usize },

    #[error("root search failed: {0}")]
    RootSearch(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },

    /// A numerical failure reported from a stored record.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    /// Whether the failure is numerical (as opposed to usage or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::Degenerate { .. }
                | Error::NotEquilibrium { .. }
                | Error::CertificateUnavailable(_)
                | Error::Generation { .. }
                | Error::RootSearch(_)
                | Error::Numerical(_)
        )
    }
}
