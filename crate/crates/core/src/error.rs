use std::fmt;

use crate::sinkhorn::ConvergenceTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A space-time location on the grid, used to report where something broke.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Locus {
    pub k: usize,
    pub i: usize,
    pub t: f64,
    pub x: f64,
}

impl fmt::Display for Locus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={:.6} (k={}), x={:.6} (i={})", self.t, self.k, self.x, self.i)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible problem at {locus}: {reason}")]
    Infeasible { locus: Locus, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no convergence after {} iterations", .trace.iterations())]
    NoConvergence { trace: Box<ConvergenceTrace> },

    #[error("refusing to materialize {required} entries (budget {budget})")]
    Budget { required: usize, budget: usize },
}

impl Error {
    pub(crate) fn shape(expected: impl fmt::Display, got: impl fmt::Display) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
