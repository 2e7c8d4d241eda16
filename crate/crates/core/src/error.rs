use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The variance of the crossing indicator collapsed below the division floor.
    #[error("degenerate conditioning event (omega11 = {omega11:e}){}", cell_suffix(.cell))]
    DegenerateConditioning {
        omega11: f64,
        /// (time index, outcome) when raised from a likelihood cell.
        cell: Option<(usize, usize)>,
    },

    #[error("numerical failure in subject {subject}: {reason}")]
    NumericalFailure { subject: usize, reason: String },

    #[error("insufficient samples: only {survived} of {requested} draws fell in the conditioning event (need {required})")]
    InsufficientSamples {
        survived: usize,
        requested: usize,
        required: usize,
    },

    #[error("objective is not finite at the starting point")]
    NonFiniteStart,

    #[error("objective failed at theta = {theta:?}: {source}")]
    Objective { theta: Vec<f64>, source: Box<Error> },
}

fn cell_suffix(cell: &Option<(usize, usize)>) -> String {
    match cell {
        Some((i, j)) => format!(" at cell (time {i}, outcome {j})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
