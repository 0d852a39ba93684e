use thiserror::Error;

/// Argument and configuration errors. Numerical failures during a solve are
/// reported per instance through [`crate::SolveStatus`], never through this type.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("batch must contain at least one instance with at least one feature (got {n}x{d})")]
    EmptyBatch { n: usize, d: usize },

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("instance {instance}: invalid time span [{t_start}, {t_end}]")]
    TimeSpan {
        instance: usize,
        t_start: f64,
        t_end: f64,
    },

    #[error("instance {instance}: evaluation times must be sorted in the integration direction and lie within the time span")]
    EvalTimes { instance: usize },

    #[error("invalid tolerances: {0}")]
    Tolerance(String),

    #[error("invalid controller configuration: {0}")]
    Controller(String),

    #[error("unknown PID preset `{0}`")]
    UnknownPreset(String),

    #[error("theta = {theta} outside [0, 1] for instance {instance}")]
    Theta { instance: usize, theta: f64 },

    #[error(
        "joint solve requires identical time spans and evaluation times across instances ({0})"
    )]
    JointMismatch(&'static str),

    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
