use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid configuration at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { path: path.into(), msg: msg.into() }
    }

    /// Exit status used by the command line front-end: numeric failures map
    /// to 2, everything else is a validation-class failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Domain(_) => 2,
            _ => 1,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
