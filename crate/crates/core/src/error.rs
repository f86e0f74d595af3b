use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the extraction and odometry pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// Points of a fit are collinear (or fewer than three), so no plane is defined.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// All normals of a circle fit are parallel; the samples describe a flat surface.
    #[error("flat surface: circle fit denominator vanished")]
    FlatSurface,

    #[error("rank-deficient normal matrix: {0}")]
    RankDeficient(String),

    /// The pose problem does not constrain all six degrees of freedom.
    #[error("degenerate: pose under-constrained along {} direction(s)", null_directions.len())]
    UnderConstrained {
        /// Unit 6-vectors `(ωx, ωy, ωz, tx, ty, tz)` spanning the unconstrained subspace.
        null_directions: Vec<[f64; 6]>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
