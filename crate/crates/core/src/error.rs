use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset: no observations were supplied")]
    EmptyDataset,

    #[error("schema error: {0}")]
    Schema(String),

    #[error("covariate z{column} is degenerate (min == max == {value})")]
    DegenerateCovariate { column: usize, value: f64 },

    #[error("z value {value} lies outside [0, 1]")]
    Domain { value: f64 },

    #[error("invalid spline space: {0}")]
    InvalidSpline(String),

    #[error("working covariance parameters are invalid: {0}")]
    CovarianceParameter(String),

    #[error("RSM working covariance needs observation times for every cluster")]
    MissingTimes,

    #[error("working covariance is ill-conditioned (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error(
        "spline normal matrix is singular; reduce the number of interior knots (currently {knots})"
    )]
    TooManyKnots { knots: usize },

    #[error("parametric covariates are collinear after removing the spline fit")]
    Collinear,

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("no grid point produced a converged penalized fit")]
    Selection,

    #[error("invalid penalty settings: {0}")]
    Penalty(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("usage: {0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Csv { source, .. } if source.is_io_error() => 5,
            Error::EmptyDataset
            | Error::Schema(_)
            | Error::DegenerateCovariate { .. }
            | Error::Domain { .. }
            | Error::MissingTimes
            | Error::Csv { .. } => 3,
            Error::CovarianceParameter(_) | Error::Penalty(_) | Error::InvalidSpline(_) => 2,
            Error::IllConditioned { .. }
            | Error::TooManyKnots { .. }
            | Error::Collinear
            | Error::Numeric(_)
            | Error::Selection
            | Error::Simulation(_) => 4,
            Error::Io { .. } | Error::Json { .. } => 5,
        }
    }
}
