use serde::Serialize;
use thiserror::Error;

use crate::measure::SignVector;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Best candidate seen by a failed sign search, so callers can refine and retry.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BestSign {
    pub sign: SignVector,
    pub norm: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("atom index {index} out of range for a space with {len} atoms")]
    InvalidAtom { index: usize, len: usize },
    #[error("refinement needs at least two parts, got {0}")]
    InvalidParts(usize),
    #[error("refinement into {0} parts leaves the dyadic grid")]
    NonDyadic(usize),
    #[error("dyadic arithmetic overflow")]
    Overflow,
    #[error("set of {len} atoms cannot carry Rademacher level {level}")]
    NotDivisible { len: usize, level: u32 },
    #[error("atoms of the set have unequal weights")]
    UnequalWeights,
    #[error("set cannot be split into two halves of equal measure")]
    Unsplittable,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("target norm is not locally convex")]
    NotLocallyConvex,
    #[error("zero vector has no norming functional")]
    ZeroVector,
    #[error("set of {size} atoms exceeds the exhaustive limit {limit}")]
    SetTooLarge { size: usize, limit: usize },
    #[error("no nonzero sign satisfies the constraints")]
    NoFeasibleSign,
    #[error("no sign below the threshold {threshold} (best {best:?})")]
    NoSignFound {
        threshold: f64,
        best: Option<Box<BestSign>>,
    },
    #[error("atom {atom} has sign-image bound {bound} above {epsilon}")]
    AtomTooLarge { atom: usize, bound: f64, epsilon: f64 },
    #[error("null-space computation degenerated")]
    DegenerateNullspace,
    #[error("numerical rank {rank} exceeds the limit {limit}")]
    RankTooLarge { rank: usize, limit: usize },
    #[error("precondition failed: indicator bound {bound} exceeds gamma/2 = {limit} at delta = {delta}")]
    PreconditionFailed {
        delta: f64,
        gamma: f64,
        bound: f64,
        limit: f64,
        witness: Vec<usize>,
    },
    #[error("stage {stage} failed: {reason}")]
    StageFailed { stage: usize, reason: String },
    #[error("adaptive net did not close after {rounds} rounds")]
    AdaptiveBudgetExhausted { rounds: usize, trace: Vec<Vec<f64>> },
    #[error("no truncation level has tail bound at most {target}")]
    NoTruncationSmallEnough { target: f64 },
    #[error("refinement would grow the space to {atoms} atoms (budget {budget})")]
    RefinementBudgetExceeded { atoms: usize, budget: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Failures that are certified negative answers of an algorithm rather
    /// than misuse of the API.
    pub fn is_certified_failure(&self) -> bool {
        matches!(
            self,
            Error::NoSignFound { .. }
                | Error::NoFeasibleSign
                | Error::AtomTooLarge { .. }
                | Error::RankTooLarge { .. }
                | Error::PreconditionFailed { .. }
                | Error::StageFailed { .. }
                | Error::AdaptiveBudgetExhausted { .. }
                | Error::NoTruncationSmallEnough { .. }
                | Error::RefinementBudgetExceeded { .. }
                | Error::NotLocallyConvex
        )
    }
}
