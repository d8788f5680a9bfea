//! Point-cloud semantic segmentation with stacked EdgeConv + NetVLAD
//! encoders over a static coordinate-space KNN graph.
//!
//! The crate is self-contained: [`tensor`] provides the reverse-mode
//! differentiation engine, [`knn`] the spatial index, [`layers`] and
//! [`network`] the model, [`dataio`] ingestion and block preparation, and
//! [`eval`] metrics and the experiment drivers used by the `ps2net` binary.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod knn;
pub mod layers;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
