//! Error taxonomy shared by the tensor core, game, agents and training code.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor shapes, names both offenders.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// NaN/Inf where finite values are required.
    Numeric(String),
    /// Out-of-range index (targets, concepts, tokens).
    Index(String),
    /// Invalid hyperparameter or argument value.
    Parameter(String),
    /// API contract violated (non-scalar loss, length mismatch, unfrozen LM, ...).
    Contract(String),
    /// Token not part of the expected surface vocabulary.
    Vocab(String),
    /// Bad or empty input data (corpora, metric inputs, malformed files).
    Data(String),
    /// Cosine of a zero-norm gradient; callers record a missing value.
    UndefinedCosine,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Vocab(m) => write!(f, "vocabulary error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::UndefinedCosine => write!(f, "cosine undefined for zero-norm gradient"),
        }
    }
}

impl std::error::Error for Error {}
