//! Active learning for joint event extraction.
//!
//! The crate bundles a joint trigger/argument extractor over a compact
//! transformer encoder, a memory-based loss predictor that scores unlabeled
//! sentences conditioned on what has already been selected in the current
//! round, batch-based sample selection, the delayed training procedure that
//! supervises the loss predictor, baseline strategies, and an experiment
//! harness.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod extractor;
pub mod graph;
pub mod harness;
pub mod mblp;
pub mod metrics;
pub mod model;
pub mod params;
pub mod selection;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
