use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("scene construction failed: {0}")]
    SceneConstruction(String),

    #[error("alpha calibration failed: {0}")]
    Calibration(String),

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),

    #[error("solver limit reached without a feasible incumbent")]
    NoIncumbent,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::Json(_) => 2,
            Error::InfeasibleScene(_) => 3,
            Error::NoIncumbent => 4,
            _ => 1,
        }
    }

    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Geometry(_) => "geometry",
            Error::InvalidInput(_) => "invalid_input",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::SceneConstruction(_) => "scene_construction",
            Error::Calibration(_) => "calibration",
            Error::TooLarge(_) => "too_large",
            Error::Config(_) => "config",
            Error::InfeasibleScene(_) => "infeasible_scene",
            Error::NoIncumbent => "no_incumbent",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
