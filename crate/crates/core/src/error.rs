use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate dynamic range")]
    DegenerateRange,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: String, found: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("container: {0}")]
    Container(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("R too high for dims")]
    RTooHigh,

    #[error("radial requires square grid")]
    RadialNotSquare,

    #[error("PCG breakdown at iteration {iteration}: non-finite residual")]
    PcgBreakdown { iteration: usize },

    #[error("non-finite iterate at iteration {iteration} ({stage})")]
    NonFinite { iteration: usize, stage: &'static str },

    #[error("patch does not fit: {0}")]
    PatchTooLarge(String),

    #[error("invalid baseline")]
    InvalidBaseline,

    #[error("AIF peak not found")]
    AifPeakNotFound,

    #[error("gamma-variate fit did not converge (residual {residual:.3e})")]
    FitNotConverged { residual: f64 },

    #[error("zero AIF")]
    ZeroAif,

    #[error("degenerate AIF")]
    DegenerateAif,

    #[error("degenerate")]
    Degenerate,

    #[error("phantom has no vessel region (no AIF source)")]
    EmptyVessel,
}

pub(crate) fn dims_mismatch(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Error {
    Error::DimMismatch {
        expected: format!("{expected:?}"),
        found: format!("{found:?}"),
    }
}
