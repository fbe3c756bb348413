//! Dual-encoder brain network classifier with mutual distillation between
//! functional and structural streams and prior-guided attention gating.

pub mod amd;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod spf;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
