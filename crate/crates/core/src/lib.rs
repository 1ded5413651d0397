//! A desk-scale fine-tuning lab for distance-triggered back-merging.
//!
//! A small neural n-gram model is pretrained on a synthetic capability task,
//! then fine-tuned on a synthetic generative-retrieval task under one of
//! several regularisers. The crate provides the parameter store, distance
//! metrics, merge algebra, model, data generators, training loop and the
//! Pareto / distance-to-ideal-point analysis used to compare runs.

pub mod analysis;
pub mod distance;
pub mod error;
pub mod merge;
pub mod model;
pub mod params;
mod serde_f64_inf;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
