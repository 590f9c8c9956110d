use alloc::string::String;
use core::fmt;

/// Errors raised by the core engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor or graph node received operands of incompatible shape.
    Shape { node: usize, op: &'static str, detail: String },
    /// Tensor data length does not match the product of its shape.
    DataLength { expected: usize, found: usize },
    /// `backward` was called on a tape that has not been evaluated.
    NotEvaluated,
    /// Gradient checking requires a scalar-valued function.
    NotScalar { len: usize },
    /// A NaN or infinity showed up where finite values are required.
    NonFinite { context: &'static str },
    /// Dimension mismatch outside the autodiff graph.
    Dimension { what: &'static str, expected: usize, found: usize },
    /// Invalid configuration value.
    Config(String),
    /// Stepping an environment that finished its episode.
    EpisodeDone,
    /// Unknown task family identifier.
    UnknownFamily(String),
    /// Argument outside its documented domain.
    OutOfRange { what: &'static str, value: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { node, op, detail } => {
                write!(f, "shape mismatch at node {node} ({op}): {detail}")
            }
            Error::DataLength { expected, found } => {
                write!(f, "tensor data length {found} does not match shape product {expected}")
            }
            Error::NotEvaluated => f.write_str("backward called before forward"),
            Error::NotScalar { len } => write!(f, "expected a scalar output, found {len} elements"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Dimension { what, expected, found } => {
                write!(f, "{what}: expected dimension {expected}, found {found}")
            }
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::EpisodeDone => f.write_str("step called after episode end without reset"),
            Error::UnknownFamily(id) => write!(f, "unknown task family `{id}`"),
            Error::OutOfRange { what, value } => write!(f, "{what} out of range: {value}"),
        }
    }
}

impl core::error::Error for Error {}
