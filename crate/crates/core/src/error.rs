use thiserror::Error;

/// Errors raised across the reflectance pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid wavelength grid: {0}")]
    InvalidGrid(String),
    #[error("no band of the spectrum lies within [{lo_nm}, {hi_nm}] nm")]
    EmptyRange { lo_nm: f64, hi_nm: f64 },
    #[error("exposure must be positive, got {0} ms")]
    ExposureInvalid(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("averaged panel DN is not positive at band {band}, pixel ({row}, {col})")]
    NonPositivePanelDn { band: usize, row: usize, col: usize },
    #[error("region of interest too small: {0}")]
    RoiTooSmall(String),
    #[error("every pixel of the region is masked")]
    AllMasked,
    #[error("too few points: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("smoothed baseline is zero")]
    ZeroBaseline,
    #[error("rotation samples cover {covered_deg:.1} deg of UAV-Sun angle, need {required_deg:.1}")]
    InsufficientAngularCoverage { covered_deg: f64, required_deg: f64 },
    #[error("sinusoid fit diverged: {0}")]
    FitDiverged(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("reference DN is not positive at DS band {0}")]
    NonPositiveReference(usize),
    #[error("all columns are constant")]
    AllColumnsConstant,
    #[error("rank deficient: requested {requested} components, {available} available")]
    RankDeficient { requested: usize, available: usize },
    #[error("integration window [{lo_nm}, {hi_nm}] nm holds fewer than two DS samples")]
    WindowEmpty { lo_nm: f64, hi_nm: f64 },
    #[error("collinear predictors (condition estimate {condition:.3e})")]
    CollinearPredictors { condition: f64 },
    #[error("no reference frame within {window_s} s of the target")]
    NoReferenceFrame { window_s: f64 },
    #[error("model needs a downwelling spectrum for prediction")]
    MissingReference,
    #[error("band mismatch: {0}")]
    BandMismatch(String),
    #[error("mean of the truth values is (near) zero")]
    ZeroTruthMean,
    #[error("mean is (near) zero")]
    ZeroMean,
    #[error("too few values: need {needed}, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("format version mismatch: expected {expected}, found {found}")]
    FormatVersionMismatch { expected: u32, found: u32 },
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },
    #[error("timestamps are not monotonically non-decreasing at row {0}")]
    NonMonotonicTimestamps(usize),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable identifier of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::EmptyRange { .. } => "EmptyRange",
            Error::ExposureInvalid(_) => "ExposureInvalid",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonPositivePanelDn { .. } => "NonPositivePanelDN",
            Error::RoiTooSmall(_) => "RoiTooSmall",
            Error::AllMasked => "AllMasked",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::ZeroBaseline => "ZeroBaseline",
            Error::InsufficientAngularCoverage { .. } => "InsufficientAngularCoverage",
            Error::FitDiverged(_) => "FitDiverged",
            Error::DegenerateFit(_) => "DegenerateFit",
            Error::NonPositiveReference(_) => "NonPositiveReference",
            Error::AllColumnsConstant => "AllColumnsConstant",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::WindowEmpty { .. } => "WindowEmpty",
            Error::CollinearPredictors { .. } => "CollinearPredictors",
            Error::NoReferenceFrame { .. } => "NoReferenceFrame",
            Error::MissingReference => "MissingReference",
            Error::BandMismatch(_) => "BandMismatch",
            Error::ZeroTruthMean => "ZeroTruthMean",
            Error::ZeroMean => "ZeroMean",
            Error::TooFewValues { .. } => "TooFewValues",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::FormatVersionMismatch { .. } => "FormatVersionMismatch",
            Error::PayloadLengthMismatch { .. } => "PayloadLengthMismatch",
            Error::NonMonotonicTimestamps(_) => "NonMonotonicTimestamps",
            Error::UnknownColumn(_) => "UnknownColumn",
            Error::Parse(_) => "Parse",
            Error::Io(_) => "Io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
