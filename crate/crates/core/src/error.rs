use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient initialization window: {duration:.3} s of IMU data, need {required:.3} s")]
    InsufficientInitWindow { duration: f64, required: f64 },

    #[error("inverse kinematics did not converge: residual {residual:.3e} m after {iterations} iterations")]
    IkNoConvergence { residual: f64, iterations: usize },

    #[error("information matrix is numerically singular (condition estimate {condition:.3e})")]
    SingularInformation { condition: f64 },

    #[error("measurement update requested without any measurement rows")]
    NoMeasurements,

    #[error("scan ending at t={scan_end:.6}: IMU coverage gap of {gap:.4} s exceeds {limit:.3} s")]
    DeskewGap { scan_end: f64, gap: f64, limit: f64 },

    #[error("{stream}: timestamps out of order ({prev:.9} followed by {next:.9})")]
    OutOfOrder { stream: String, prev: f64, next: f64 },

    #[error("{file}:{line}: {reason}")]
    Data { file: String, line: u64, reason: String },

    #[error("{0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("infeasible gait: {0}")]
    InfeasibleGait(String),

    #[error("simulation failed at t={t:.4}: {reason}")]
    Simulation { t: f64, reason: String },

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("filter failed at t={t:.6}: {source}")]
    Filter {
        t: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn filter(t: f64, source: Error) -> Self {
        Error::Filter { t, source: Box::new(source) }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
