use thiserror::Error;

/// Unified error type for every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A column slated for standardization has no spread.
    #[error("zero variance in column `{0}`")]
    ZeroVariance(String),

    /// A declared treatment arm has no members.
    #[error("empty arm {0}")]
    EmptyArm(usize),

    /// Inputs that must agree in shape do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A dense tensor would exceed the configured entry cap; pairwise mode
    /// handles larger problems one arm-pair at a time.
    #[error(
        "cost tensor with {entries} entries exceeds the cap of {cap}; \
         use pairwise mode or reduce the sample"
    )]
    MemoryCap { entries: u128, cap: u128 },

    /// The iteration produced a NaN or infinity in a potential vector.
    #[error("non-finite potential update at iteration {iteration}")]
    NonFinite { iteration: usize },

    /// Exponentiating the final coupling overflowed.
    #[error("coupling exponentiation overflowed; retry with a larger epsilon")]
    CouplingOverflow,

    /// Logistic regression found a separating hyperplane.
    #[error("perfect separation in propensity fit; enable ridge regularization")]
    Separation,

    /// Newton iterations for the propensity model did not converge.
    #[error("propensity fit did not converge within {0} iterations")]
    PropensityNonConvergence(usize),

    /// Every row of a conditional-weight matrix fell below the drop
    /// threshold, so no counterfactual can be imputed.
    #[error("no overlap: all rows dropped for arm pair ({from_arm}, {to_arm})")]
    NoOverlap { from_arm: usize, to_arm: usize },

    /// Too many bootstrap replicates failed to produce an estimate.
    #[error("{failed} of {total} bootstrap replicates failed (over 20%)")]
    BootstrapFailures { failed: usize, total: usize },

    /// A caller-supplied argument is outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// File access or parse failure.
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
