use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point has non-positive depth {0}")]
    DepthNonPositive(f64),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("minimal solver found no valid pose")]
    NoSolution,
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("no consensus: best model has {inliers} inliers")]
    NoConsensus { inliers: usize },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("descriptor dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("all objects neglected or failed: {0:?}")]
    AllObjectsNeglected(Vec<String>),
    #[error("no transform for object {0}")]
    MissingTransform(String),
    #[error("could not place scene after {0} attempts")]
    PlacementFailure(usize),
}
