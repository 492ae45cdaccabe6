use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, ranges, sizes).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A computation produced or met a non-finite or singular quantity.
    #[error("numerical failure in `{op}`: {detail}")]
    Numerical { op: &'static str, detail: String },
    /// Malformed binary input.
    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },
    /// The requested number of images of a class could not be served.
    #[error("dataset exhausted: class {class} needs {needed} images, {available} available")]
    Exhausted {
        class: usize,
        needed: usize,
        available: usize,
    },
    /// Invalid configuration file or value.
    #[error("config error: {0}")]
    Config(String),
    /// Training loss left the sane range.
    #[error("training diverged at iteration {iteration} (stage {stage}): loss = {loss}")]
    Diverged {
        stage: u8,
        iteration: usize,
        loss: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
