//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Shape errors carry both
//! offending shapes so a failed pipeline names the layer dimensions that
//! disagreed instead of a bare "mismatch".

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Two matrix/vector operands with incompatible shapes. Vectors are
    /// reported as (len, 1).
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// A single dimension that did not match what the operation required.
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A parameter outside its documented range. The message names the field.
    InvalidArgument(String),
    /// Schedule with `alpha_bar(t) == 1`; the denoise correction gain divides
    /// by `sqrt(1 - alpha_bar)` and is undefined there.
    DegenerateSchedule { t: usize },
    /// A computation produced NaN or infinity where a finite value is required.
    NonFinite { what: &'static str },
    /// Training loss left the finite range.
    Divergence { layer: usize, epoch: usize },
    /// Input collection was empty where at least one element is required.
    EmptyData { what: &'static str },
    /// Labels required for this mode but not supplied.
    MissingLabels,
    /// A query identity with no match in the gallery.
    IdNotInGallery { id: u32 },
    /// File contents violate the format (truncation, bad blob sizes,
    /// non-finite payload values).
    CorruptFile(String),
    /// Magic bytes or container version not recognized.
    VersionMismatch { expected: String, found: String },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {}x{} vs {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)
            }
            Error::DimMismatch { what, expected, got } => {
                write!(f, "{what}: expected dimension {expected}, got {got}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::DegenerateSchedule { t } => {
                write!(f, "degenerate schedule: alpha_bar({t}) == 1, correction gain undefined")
            }
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::Divergence { layer, epoch } => {
                write!(f, "training diverged at layer {layer}, epoch {epoch}: loss is non-finite")
            }
            Error::EmptyData { what } => write!(f, "{what} must not be empty"),
            Error::MissingLabels => write!(f, "labels required but not provided"),
            Error::IdNotInGallery { id } => {
                write!(f, "query id {id} has no gallery entry")
            }
            Error::CorruptFile(msg) => write!(f, "corrupt file: {msg}"),
            Error::VersionMismatch { expected, found } => {
                write!(f, "unrecognized format: expected {expected}, found {found}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
