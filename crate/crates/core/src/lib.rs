//! Landmark detection for manga faces: the 60-point landmark model, label
//! quality control and completion, a cascaded shape-regression network,
//! chin-normalized evaluation, and the file-backed pipeline tying them
//! together.

pub mod annotation;
pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod net;
pub mod pipeline;
pub mod qc;
pub mod schema;
pub mod synth;

pub use error::{Error, Result};
pub use schema::{LandmarkGroup, LandmarkSet, Point, NUM_LANDMARKS};
