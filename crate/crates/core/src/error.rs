use thiserror::Error;

/// Errors raised by the solvers, the simulator and the instance parser.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A monotone bracket for `l'(x) = alpha` could not be established.
    /// This means the loss-rate derivative is not increasing on the searched range.
    #[error("root bracket failure for node {node} at alpha = {alpha}: {detail}")]
    RootBracketFailure { node: usize, alpha: f64, detail: String },

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("RB index not monotone at state {state}: {value} < {previous}")]
    IndexabilityViolation { state: usize, value: f64, previous: f64 },

    #[error("state space has {states} states, above the cap of {cap}")]
    StateSpaceTooLarge { states: usize, cap: usize },

    #[error("no convergence after {iterations} iterations (span {span:e})")]
    NoConvergence { iterations: usize, span: f64 },

    #[error("degenerate baseline profit {0}; optimality gap undefined")]
    DegenerateBaseline(f64),

    #[error("simulation outside 3x CI: simulated {simulated}, exact {exact}, half-width {half_width}")]
    ValidationFailure { simulated: f64, exact: f64, half_width: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o: {0}")]
    Io(String),

    /// The reader of the output went away.
    #[error("output closed")]
    BrokenPipe,
}

impl Error {
    /// True for failures of a numerical routine, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RootBracketFailure { .. }
                | Error::IndexabilityViolation { .. }
                | Error::NoConvergence { .. }
                | Error::DegenerateBaseline(_)
                | Error::ValidationFailure { .. }
                | Error::StateSpaceTooLarge { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            return Error::BrokenPipe;
        }
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if let csv::ErrorKind::Io(io) = e.kind() {
            if io.kind() == std::io::ErrorKind::BrokenPipe {
                return Error::BrokenPipe;
            }
        }
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
