use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum PasrError {
    #[error("coordinate out of range: lat={lat}, lon={lon}")]
    CoordinateOutOfRange { lat: f64, lon: f64 },
    #[error("invalid geohash character '{0}'")]
    InvalidGeohashChar(char),
    #[error("geohash length {len} outside supported range 1..=16")]
    GeohashLength { len: usize },
    #[error("n-gram order {n} exceeds geohash length {len}")]
    NgramOrder { n: usize, len: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PasrError>;
