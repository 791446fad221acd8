use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("directed angle undefined: points coincide in the x-z plane")]
    DegenerateAngle,

    #[error(
        "antennas {first} and {second} are {spacing:.3} m apart, beyond the phase-unwrap bound of {bound:.3} m"
    )]
    UnwrapAmbiguity {
        first: usize,
        second: usize,
        spacing: f64,
        bound: f64,
    },

    #[error("rank-deficient array geometry")]
    RankDeficient,

    #[error("aperture interpolation needs at least two rows and two columns, found {rows} x {cols}")]
    DegenerateAperture { rows: usize, cols: usize },

    #[error("power spectrum is identically zero")]
    EmptySpectrum,

    #[error("reconstruction box spans {reach:.2} m in range, beyond the unambiguous range {limit:.2} m")]
    BoxOutOfRange { reach: f64, limit: f64 },

    #[error("rays are parallel")]
    ParallelRays,

    #[error("combining needs at least three reflected paths, got {0}")]
    TooFewPaths(usize),

    #[error("every ray pair is parallel")]
    DegenerateGeometry,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("duplicate path label {0}")]
    DuplicateLabel(u32),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{stage}: {inner}")]
    Stage { stage: &'static str, inner: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// The error underneath any stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { inner, .. } => inner.root(),
            other => other,
        }
    }

    pub(crate) fn at(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |inner| Error::Stage {
            stage,
            inner: Box::new(inner),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
