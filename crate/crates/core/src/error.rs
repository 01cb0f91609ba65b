use std::path::PathBuf;

use crate::precision::Precision;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch renormalization used in inference mode before any training update")]
    NoRunningStatistics,

    #[error(
        "entropic weight {eps} is below the {precision} precision floor {floor}; \
         the scaling iteration would overflow"
    )]
    PrecisionFloor {
        eps: f64,
        floor: f64,
        precision: Precision,
    },

    #[error("numerical overflow in {precision} Sinkhorn iteration after {iteration} iterations")]
    SinkhornOverflow {
        precision: Precision,
        iteration: usize,
    },

    #[error(
        "auction did not converge within {iterations} bidding rounds (best cost found {best_cost})"
    )]
    AuctionNotConverged { iterations: usize, best_cost: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("particle initialisation failed after {0} attempts")]
    Overlap(usize),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("no points in {}", .0.display())]
    NoPoints(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::SinkhornOverflow { .. }
                | Error::AuctionNotConverged { .. }
                | Error::PrecisionFloor { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
