//! Sketch-based fine-grained retrieval laboratory: sketch data, models,
//! ranking metrics and the training procedures built on them.

pub mod error;
pub mod rng;
pub mod sketch;

pub use error::{Result, SketchError};
pub mod models;
pub mod metrics;
pub mod retrieval;
pub mod otf;
pub mod select;
pub mod generation;
pub mod pretext;
pub mod fscil;
