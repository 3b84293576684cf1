//! Reasoning-aware table-to-text generation with per-category
//! vector-quantized codebooks.

pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod tables;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
