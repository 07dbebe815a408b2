//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data error: {0}")]
    Data(String),

    #[error("dates not strictly increasing for station {station}: {date} follows {previous}")]
    NonMonotoneDates {
        station: String,
        date: String,
        previous: String,
    },

    #[error("point ({lon}, {lat}) outside raster extent")]
    OutsideRaster { lon: f64, lat: f64 },

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("matrix not positive definite at pivot {pivot}")]
    NotPositiveDefinite { pivot: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("observation outside family support: {0}")]
    Support(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("Newton iteration diverged after {iterations} steps (last objectives {last:?})")]
    NewtonDiverged { iterations: usize, last: Vec<f64> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
