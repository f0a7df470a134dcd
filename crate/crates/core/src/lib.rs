//! SHA-LRT: salient history attention in front of a relative-position Transformer
//! encoder with a layer-refined mechanism, trained jointly with an auxiliary
//! slot-label generation decoder, for multi-turn spoken language understanding.

pub mod error;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sha;
pub mod slg;
pub mod train;

pub use error::{Error, Result};
