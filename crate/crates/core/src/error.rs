//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: empty reduction over axis {axis}")]
    EmptyReduction { op: &'static str, axis: usize },

    #[error("{what}: expected {expected}, got {got}")]
    Invalid {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {place}")]
    NonFinite { place: String },

    #[error("flow field singularity: denominator {denom} below 1e-12 at t={t}")]
    Singularity { denom: f64, t: f64 },

    #[error("sampler diverged at step {step}")]
    Divergence { step: usize },

    #[error("training aborted at step {step}: non-finite loss (last finite: {last})")]
    NanAbort { step: u64, last: String },

    #[error("degenerate batch: no unmasked positions for any loss term")]
    DegenerateBatch,

    #[error("sequence overflow: need {need} positions, max is {max}")]
    Overflow { need: usize, max: usize },

    #[error("unknown word id {id} (lexicon has {count} words)")]
    UnknownWord { id: usize, count: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {file}: {reason}")]
    Format { file: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
