use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DicError>;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum DicError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("border of {border} px is too large for a {width}x{height} image")]
    BorderTooLarge {
        border: usize,
        width: usize,
        height: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no subset footprint fits inside the region of interest")]
    EmptyGrid,
    #[error("image of {width}x{height} is too small for spline interpolation (need at least 4x4)")]
    ImageTooSmall { width: usize, height: usize },
    #[error("sample ({x}, {y}) lies outside the interpolation domain")]
    OutOfDomain { x: f64, y: f64 },
    #[error("correlation window has a degenerate spectrum")]
    DegenerateSpectrum,
    #[error("gaussian peak fit failed")]
    FitFailed,
    #[error("every window in the pyramid level was rejected")]
    AllInvalid,
    #[error("subset has zero intensity variation")]
    DegenerateSubset,
    #[error("seed point at ({x}, {y}) failed: {reason}")]
    SeedFailed { x: f64, y: f64, reason: String },
    #[error("least-squares fit is rank deficient")]
    RankDeficient,
    #[error("deformation gradient is singular or inverts orientation")]
    SingularDeformation,
    #[error("displacement grid of {rows}x{cols} is smaller than the {window}x{window} strain window")]
    GridTooSmall {
        rows: usize,
        cols: usize,
        window: usize,
    },
    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("truncated file {0}")]
    TruncatedFile(PathBuf),
    #[error("no files match pattern {0:?}")]
    NoMatch(String),
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("deformation field is not invertible over the image: {0}")]
    NonInvertibleSpec(String),
    #[error("no crossing of the attenuation threshold in the profile")]
    NoCrossing,
    #[error("need at least {needed} entries, got {got}")]
    TooFewEntries { needed: usize, got: usize },
}

impl DicError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DicError::Io {
            path: path.into(),
            source,
        }
    }
}
