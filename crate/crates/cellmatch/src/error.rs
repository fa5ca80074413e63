//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Point cloud has no usable 3-D extent (rank-deficient covariance or
    /// singular normal matrix).
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(&'static str),

    /// A realignment round produced fewer correspondences than an affine fit needs.
    #[error("realignment round produced {found} correspondences, need at least {need}")]
    NoMatches { found: usize, need: usize },

    #[error("covariance diagonal entry {value} is not positive")]
    NonPositiveVariance { value: f64 },

    /// Quadratic cost queried with a repeated node on one side.
    #[error("quadratic cost requires distinct nodes on both sides")]
    SamePair,

    #[error("cost weights are all zero")]
    ZeroWeights,

    /// A matching uses an assignment outside the instance's allowed set.
    #[error("matching assigns left {left} to right {right}, which the instance forbids")]
    ForbiddenPair { left: usize, right: usize },

    /// Brute-force enumeration requested beyond its size bound.
    #[error("instance of size {n_left}x{n_right} exceeds the brute-force bound {bound}")]
    TooLarge {
        n_left: usize,
        n_right: usize,
        bound: usize,
    },

    /// A pairwise matching required by a triple check is absent.
    #[error("pairwise matching ({a},{b}) is missing")]
    MissingPair { a: usize, b: usize },

    /// synchronization_loss got a multi-matching that is not cycle consistent.
    #[error("multi-matching is not cycle consistent ({broken} broken chains)")]
    InconsistentInput { broken: usize },

    #[error("group {group} has support {support}, need at least {need}")]
    InsufficientSupport {
        group: usize,
        support: usize,
        need: usize,
    },

    #[error("search space has no dimensions")]
    EmptySpace,

    #[error("no trial satisfies the instance-size cap")]
    NoFeasible,

    #[error("learning stage {stage} failed: {source}")]
    StageFailed {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    /// A pipeline stage aborted; artifacts written by earlier stages remain.
    #[error("pipeline stage {stage} failed: {source}")]
    PipelineStage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// Rejection sampling could not place all labels at the required separation.
    #[error("failed to place label {label} after {attempts} attempts")]
    PackingFailed { label: usize, attempts: usize },

    /// Supervised operations require ground-truth labels on every worm.
    #[error("worm {worm_id} carries no ground-truth labels")]
    MissingLabels { worm_id: String },

    /// Input data violates a documented schema invariant.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
