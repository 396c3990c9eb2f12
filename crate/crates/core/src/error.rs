use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cube at level {level} is already at the finest mesh level")]
    LevelAtFinest { level: i32 },

    #[error("ancestor {steps} levels above level {level} lies outside the grid scale range (coarsest {coarsest})")]
    OutOfRange { level: i32, steps: i32, coarsest: i32 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cube {cube} is not aligned with the mesh or grid")]
    Misaligned { cube: String },

    #[error("cube {cube} does not fit inside the function window")]
    OutsideWindow { cube: String },

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("quadrature infeasible: {0}")]
    QuadratureInfeasible(String),

    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),

    #[error("normalization gate failed for {what}: measured/allowed ratio {ratio:.6}")]
    Normalization { what: String, ratio: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("stopping cubes overlap: {0}")]
    Overlap(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("tolerance breach: {0}")]
    Tolerance(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn misaligned(cube: impl fmt::Display) -> Self {
        Error::Misaligned { cube: cube.to_string() }
    }

    pub(crate) fn outside(cube: impl fmt::Display) -> Self {
        Error::OutsideWindow { cube: cube.to_string() }
    }
}
