use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("channel mismatch: kernel has {kernel} input channels, tensor has {input}")]
    ChannelMismatch { kernel: usize, input: usize },

    #[error("index ({p}, {q}, {z}, {y}) out of range for kernel {k}x{k}x{g}x{h}")]
    IndexOutOfRange {
        p: usize,
        q: usize,
        z: usize,
        y: usize,
        k: usize,
        g: usize,
        h: usize,
    },

    #[error("SVD did not converge")]
    SvdNoConvergence,

    #[error("iterative solver did not reach tolerance {tol:e} within {max_iter} iterations (residual {residual:e})")]
    IterationLimit {
        tol: f64,
        max_iter: usize,
        residual: f64,
    },

    #[error("singular pair failed certification: residual {residual:e} exceeds {bound:e}")]
    Uncertified { residual: f64, bound: f64 },

    #[error("sigma_min is not simple and positive (sigma {sigma:e}, gap {gap:e}); gradient undefined")]
    DegenerateSpectrum { sigma: f64, gap: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
