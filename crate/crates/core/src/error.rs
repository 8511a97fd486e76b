use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MevcError>;

#[derive(Debug, Error)]
pub enum MevcError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("position ({i}, {j}) outside the {out_h}x{out_w} output grid")]
    OutOfGrid {
        i: usize,
        j: usize,
        out_h: usize,
        out_w: usize,
    },

    #[error("kernel entry (c={channel}, dy={dy}, dx={dx}) outside kernel bounds")]
    KernelBounds { channel: usize, dy: usize, dx: usize },

    #[error("layer has no reference cache; a key frame must be processed first")]
    MissingCache,

    #[error("frame {frame}: {reason}")]
    Frame { frame: usize, reason: String },

    #[error("frame {frame}, layer {layer}: {source}")]
    Layer {
        frame: usize,
        layer: usize,
        #[source]
        source: Box<MevcError>,
    },

    #[error("raw file truncated: frame {frame} is incomplete")]
    Truncated { frame: usize },

    #[error("unknown Bayer pattern {0:?}")]
    UnknownPattern(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl MevcError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MevcError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MevcError::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        MevcError::InvalidParam(msg.into())
    }

    /// True for errors caused by the filesystem rather than by data or parameters.
    pub fn is_io(&self) -> bool {
        match self {
            MevcError::Io { .. } => true,
            MevcError::Layer { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
