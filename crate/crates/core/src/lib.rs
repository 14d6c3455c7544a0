pub mod annotator;
pub mod augment;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod features;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod segment;
pub mod stream;
pub mod synthgen;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
