use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("tape already consumed by a backward pass without retain")]
    TapeConsumed,

    #[error("numerical overflow in `{variable}` at t={time}")]
    NumericalOverflow { variable: &'static str, time: f64 },

    #[error("degenerate retention schedule: {0}")]
    DegenerateSchedule(String),

    #[error("capacity exceeded: {requested} tokens requested, positional tables hold {max}")]
    Capacity { requested: usize, max: usize },

    #[error("training aborted: {0}")]
    TrainingAbort(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by non-finite values rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalOverflow { .. } | Error::TrainingAbort(_) | Error::Domain { .. })
    }
}
