use std::path::PathBuf;

use crate::incentive::{DeltaThetaSolution, IncentiveMatrices};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("value error: {0}")]
    Value(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("right-hand side produced NaN at t={t} from a finite state")]
    NonFiniteRhs { t: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("finite escape at t={t_escape} (norm {norm:e})")]
    Escape { t_escape: f64, norm: f64 },

    #[error("singular gain at t={t}: condition number {cond:e}")]
    SingularGain { t: f64, cond: f64 },

    #[error("concavity equation still escapes at gamma cap {cap}")]
    NotSolvableAtCap { cap: f64 },

    #[error("incentive system not solved: max matching residual {max_residual:e} exceeds {threshold:e} (first at t={t_first})")]
    NoIncentiveSolution {
        max_residual: f64,
        threshold: f64,
        t_first: f64,
        partial: Box<(DeltaThetaSolution, IncentiveMatrices)>,
    },

    #[error("relation {what} violated at t={t}: gap {gap:e}")]
    RelationViolated { what: String, t: f64, gap: f64 },

    #[error("non-finite simulated state at t={t} on path {path}")]
    NonFiniteState { t: f64, path: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-friendly kind, used in manifests and CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse(_) => "ParseError",
            Error::Dimension(_) => "DimensionError",
            Error::Value(_) => "ValueError",
            Error::Io { .. } => "IoError",
            Error::NonFiniteRhs { .. } => "NonFiniteRhs",
            Error::GridMismatch(_) => "GridMismatch",
            Error::Escape { .. } => "Escape",
            Error::SingularGain { .. } => "SingularGain",
            Error::NotSolvableAtCap { .. } => "NotSolvableAtCap",
            Error::NoIncentiveSolution { .. } => "NoIncentiveSolution",
            Error::RelationViolated { .. } => "RelationViolated",
            Error::NonFiniteState { .. } => "NonFiniteState",
        }
    }
}
