use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("index {index} outside stored knot range [{lo}, {hi}]")]
    Range { index: i64, lo: i64, hi: i64 },

    #[error("value {value} outside domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("order k = {0} is not supported by this operation")]
    UnsupportedOrder(usize),

    #[error("inversion failed in bin {bin} for y = {y}")]
    Inversion { bin: i64, y: f64 },

    #[error("numeric domain error in `{op}` (operand {operand})")]
    NumericDomain { op: &'static str, operand: f64 },

    #[error("operand recorded on a stale tape generation")]
    StaleTape,

    #[error("derivative of order {requested} requested but the transform is only C^{available}")]
    Smoothness { requested: usize, available: usize },

    #[error("force undefined at singular point (|x| = {norm})")]
    SingularPoint { norm: f64 },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn in_layer(self, layer: usize) -> Self {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }

    /// The innermost error, past layer and sample context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } | Error::Sample { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn at_sample(self, index: usize) -> Self {
        Error::Sample {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
