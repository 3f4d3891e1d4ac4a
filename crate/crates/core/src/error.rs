use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box ({x_min}, {y_min}, {x_max}, {y_max}): {reason}")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        reason: &'static str,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("constant-time NMS capacity {capacity} exceeded by {count} detections")]
    CapacityExceeded { capacity: usize, count: usize },

    #[error("raster shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("object cannot be planted: {0}")]
    InfeasiblePlant(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("raster encoding: {0}")]
    Encoding(String),

    #[error("query failed: {0}")]
    Query(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
