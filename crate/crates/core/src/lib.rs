//! Bottom-up panoptic segmentation of large outdoor point clouds: cylinder
//! blocks, per-point semantic, offset and embedding features, candidate
//! instances from several generators, scoring and pruning, and block merging.

pub mod clustering;
pub mod error;
pub mod features;
pub mod losses;
pub mod merge;
pub mod metrics;
pub mod model;
pub mod pcio;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod selection;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result, Stage};
pub use model::*;
