//! Dual-frequency PolSAR scene classification toolkit.
//!
//! The pipeline builds on complex Wishart statistics of polarimetric
//! covariance matrices: a compact CNN + single-head transformer feature
//! extractor, statistical sample rectification that detects and regenerates
//! noisy pixels, and gate-selected distillation that fuses two frequency
//! bands through per-sample teacher selection. Synthetic dual-band scenes
//! with controlled class confusion stand in for measured campaigns.

pub mod distill;
pub mod error;
pub mod formats;
pub mod nn;
pub mod metrics;
pub mod polsar;
pub mod rectify;
pub mod scene;
pub mod seed;
pub mod wishart;

pub use error::{Error, Result};
