//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Input vector or matrix dimension does not match the model dimension.
    DimensionMismatch { expected: usize, got: usize },
    /// A matrix that must be symmetric positive definite failed factorization.
    NotPositiveDefinite,
    /// A geometric map is undefined at the sensor origin.
    DegeneratePosition,
    /// Student-t degrees of freedom must be positive.
    InvalidDof(f64),
    /// Conditioning value lies in a region of negligible mixture support.
    ZeroMarginal,
    /// Pruning would remove every mixture component.
    AllComponentsPruned,
    /// An operation received an empty collection it cannot work with.
    EmptyInput(&'static str),
    /// Feasibility conditioning assigned zero weight to every hypothesis.
    AllInfeasible,
    /// The update was handed an empty partition set for a non-empty scan.
    EmptyPartitions,
    /// No valid assignment exists for the requested cost matrix.
    InfeasibleAssignment,
    /// Every particle received zero posterior weight.
    DegenerateWeights,
    /// Query point lies outside the sensor field of view.
    OutsideFov,
    /// Clutter density vanishes at the query point.
    ZeroClutterDensity,
    /// Malformed file content or option string.
    Format(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Error::NotPositiveDefinite => write!(f, "matrix is not positive definite"),
            Error::DegeneratePosition => {
                write!(f, "map undefined at the sensor origin")
            }
            Error::InvalidDof(dof) => write!(f, "invalid degrees of freedom {dof}"),
            Error::ZeroMarginal => {
                write!(f, "conditioning point has zero marginal density")
            }
            Error::AllComponentsPruned => {
                write!(f, "pruning would remove all mixture components")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::AllInfeasible => {
                write!(f, "all hypotheses are infeasible")
            }
            Error::EmptyPartitions => {
                write!(f, "no partitions supplied for a non-empty scan")
            }
            Error::InfeasibleAssignment => write!(f, "no feasible assignment exists"),
            Error::DegenerateWeights => write!(f, "all particle weights are zero"),
            Error::OutsideFov => write!(f, "point lies outside the field of view"),
            Error::ZeroClutterDensity => {
                write!(f, "clutter density vanishes at the query point")
            }
            Error::Format(msg) => write!(f, "{msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
