//! Tri-stream dynamic-weight metric fusion for cloth-changing person
//! re-identification.
//!
//! Works on precomputed face / head-limb / global embeddings. The decision
//! module is trained on fused distances and then scored on query × gallery
//! retrieval with CMC and mAP.

// `!(x > 0.0)` is deliberate: it also rejects NaN. Index loops stay where
// they mirror a formula term by term.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod distance;
pub mod dwt;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
