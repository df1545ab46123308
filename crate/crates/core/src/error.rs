use thiserror::Error;

use crate::tissue::Tissue;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid dimensions: {0}")]
    BadDims(String),
    #[error("coordinate ({0}, {1}, {2}) out of bounds for volume {3}x{4}x{5}")]
    OutOfBounds(usize, usize, usize, usize, usize, usize),
    #[error("label code {0} is not defined")]
    BadLabelCode(u8),
    #[error("unknown tissue name {0:?}")]
    BadTissueName(String),
    #[error("tissue {0} has no trained model")]
    UnmodeledTissue(Tissue),
    #[error("model fit failed: {0}")]
    ModelFit(String),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}
