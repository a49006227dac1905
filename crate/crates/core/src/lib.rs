//! Budget-aware active label correction for semantic segmentation.
//!
//! The engine ranks superpixels by how likely their pseudo label is wrong,
//! asks an annotator (or a simulated oracle) to confirm or correct one
//! representative pixel per superpixel, propagates the answer across the
//! superpixel, and retrains a predictor between rounds.

pub mod acquisition;
pub mod correction;
pub mod cost;
pub mod dataset;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod pool;
pub mod predictor;
pub mod session;
pub mod synth;
pub mod tensor_io;
