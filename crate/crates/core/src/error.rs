//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} on {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph cycle or dangling node reference at node {0}")]
    GraphCycle(usize),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("fiber placement failed after {attempts} attempts (n={n}, r_f={r_f})")]
    PlacementFailure { n: usize, r_f: f64, attempts: usize },
    #[error("contrastive batch too small: need at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("alpha must lie in (0, 1), got {0}")]
    AlphaOutOfRange(f64),
    #[error("z-score normalizer has not been fitted")]
    UnfittedNormalizer,
    #[error("image size mismatch: expected {expected:?}, got {got:?}")]
    SizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("query {0} has no ground-truth counterpart")]
    MissingGroundTruth(u64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero variance in targets; R^2 is undefined")]
    ZeroVariance,
    #[error("frozen checkpoint missing: {0}")]
    FrozenCheckpointMissing(String),
    #[error("timestep {k} out of range [1, {max}]")]
    TimestepOutOfRange { k: usize, max: usize },
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
