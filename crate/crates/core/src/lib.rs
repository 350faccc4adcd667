//! Multi-granularity dense contrastive pre-training at desk scale.
//!
//! Instance-level, pixel-level and cross-image semantic objectives trained on a
//! synthetic shapes dataset, with frozen-encoder probes for evaluation.

pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod similarity;
pub mod synthdata;
pub mod trainer;

pub use error::{DscError, Result};
