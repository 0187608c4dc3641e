use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty signal")]
    EmptySignal,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid acquisition grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("degenerate convolution kernel")]
    DegenerateKernel,
    #[error("zero polynomial")]
    ZeroPolynomial,
    #[error("kernel not time-localized in window")]
    KernelNotLocalized,
    #[error("kernel has no analytic descriptor")]
    MissingDescriptor,
    #[error("Strang-Fix condition violated at bin {0}")]
    StrangFixViolated(usize),
    #[error("insufficient moments: have {have}, need {need}")]
    InsufficientMoments { have: usize, need: usize },
    #[error("moment vector is identically zero")]
    ZeroMoments,
    #[error("indistinguishable spikes")]
    IndistinguishableSpikes,
    #[error("degenerate linearization")]
    DegenerateLinearization,
    #[error("fewer than {0} usable roots")]
    TooFewRoots(usize),
    #[error("model order {k} too large for {n} samples")]
    ModelOrder { k: usize, n: usize },
    #[error("all restarts degenerate: {0}")]
    AllRestartsDegenerate(String),
    #[error("every pixel failed: {0}")]
    AllPixelsFailed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("version mismatch: unsupported version {0}")]
    VersionMismatch(u64),
    #[error("malformed record on line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },
}

impl Error {
    /// Stable machine-readable code, one per failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptySignal => "empty_signal",
            Error::LengthMismatch(..) => "length_mismatch",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateKernel => "degenerate_kernel",
            Error::ZeroPolynomial => "zero_polynomial",
            Error::KernelNotLocalized => "kernel_not_localized",
            Error::MissingDescriptor => "missing_descriptor",
            Error::StrangFixViolated(_) => "strang_fix_violated",
            Error::InsufficientMoments { .. } => "insufficient_moments",
            Error::ZeroMoments => "zero_moments",
            Error::IndistinguishableSpikes => "indistinguishable_spikes",
            Error::DegenerateLinearization => "degenerate_linearization",
            Error::TooFewRoots(_) => "too_few_roots",
            Error::ModelOrder { .. } => "model_order",
            Error::AllRestartsDegenerate(_) => "all_restarts_degenerate",
            Error::AllPixelsFailed(_) => "all_pixels_failed",
            Error::Io(_) => "io",
            Error::MalformedHeader(_) => "malformed_header",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::VersionMismatch(_) => "version_mismatch",
            Error::MalformedRecord { .. } => "malformed_record",
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::MalformedHeader(_)
                | Error::SizeMismatch { .. }
                | Error::VersionMismatch(_)
                | Error::MalformedRecord { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
