//! Few-shot segmentation with a target-aware bi-transformer pyramid over
//! frozen backbone features.

pub mod backbone;
pub mod correlation;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod mask;
pub mod model;
pub mod network;
pub mod ops;
pub mod params;
pub mod predict;
pub mod train;
pub mod ttl;

pub use error::{Error, Result};
