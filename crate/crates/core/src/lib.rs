//! Dual-branch (time / frequency) reconstruction model for spatio-temporal
//! correlation anomaly detection over multi-node, multi-modal sensor series.

pub mod dataio;
pub mod config;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graphlearn;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod registry;
pub mod rwkv;
pub mod scoring;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
