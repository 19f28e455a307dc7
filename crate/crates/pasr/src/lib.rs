//! PASR: proximity-aware self-attention sequential location recommender.
//!
//! The crate is organised around the stages of the recommender:
//! geohash encoding and n-gram tokenization ([`geocode`]), grid
//! partitioning of the active region ([`gridmap`]), spatial negative
//! sampling ([`sampling`]), a small reverse-mode autodiff engine
//! ([`autodiff`]), the attention network itself ([`model`]), the
//! importance-weighted BCE objective ([`objective`]), dataset handling
//! and training ([`pipeline`]), and ranking metrics ([`metrics`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geocode;
pub mod gridmap;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod sampling;

pub use config::ModelConfig;
pub use error::PasrError;
