use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NumericFault { op: &'static str },

    #[error("{what} needs {needed} bytes but the memory budget is {limit} bytes{hint}")]
    MemoryBudget {
        what: &'static str,
        needed: usize,
        limit: usize,
        hint: &'static str,
    },

    #[error("degenerate variance in batch norm layer {layer}: {detail}")]
    DegenerateVariance { layer: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel distance undefined: {0}")]
    UndefinedDistance(&'static str),

    #[error("effective rank undefined: spectrum is all zero")]
    UndefinedRank,

    #[error("alignment undefined: no probe sample carries label {class}")]
    EmptyClass { class: usize },

    #[error("snapshot has no adversarial labels")]
    MissingLabels,

    #[error("kernels were computed on different probe sets")]
    ProbeMismatch,

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("matrix has a significantly negative eigenvalue {value:e} (largest {max:e})")]
    NotPsd { value: f64, max: f64 },

    #[error("degenerate subset {subset}: standard deviation {std:e} is below the guard")]
    DegenerateSubset { subset: usize, std: f64 },

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericFault { .. }
                | Error::DegenerateVariance { .. }
                | Error::NoConvergence { .. }
                | Error::NotPsd { .. }
                | Error::DegenerateSubset { .. }
                | Error::UndefinedRank
                | Error::UndefinedDistance(_)
        )
    }
}
