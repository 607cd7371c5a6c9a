use thiserror::Error;

/// Errors raised across the estimation pipeline.
///
/// The `Display` text is prefixed with the module that raised it so that the
/// CLI can report pipeline failures without extra wrapping.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config: {0}")]
    Config(String),

    #[error("filter: all particle weights vanished at step {step}")]
    DegenerateFilter {
        step: usize,
        last_estimate: Option<Box<crate::filter::PostureEstimate>>,
    },

    #[error("filter: observation {index} is not strictly after its predecessor")]
    OutOfOrder { index: usize },

    #[error("calib: incomplete calibration, missing routine {0}")]
    IncompleteCalibration(String),

    #[error("calib: fit quality for routine {routine} too low (rms {rms:.2e} m > {threshold:.2e} m)")]
    CalibrationQuality {
        routine: String,
        rms: f64,
        threshold: f64,
    },

    #[error("calib: degenerate point set: {0}")]
    RankDeficient(String),

    #[error("synth: path unreachable at waypoint {index} (residual {residual:.3e})")]
    Unreachable { index: usize, residual: f64 },

    #[error("io: {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("io: {path}: timestamps not strictly increasing at line {line}")]
    Ordering { path: String, line: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
