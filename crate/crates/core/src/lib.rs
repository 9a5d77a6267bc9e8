//! Interactive few-shot segmentation.
//!
//! Sparse clicks on a handful of support images produce masks for those
//! images and, through propagated support information, for never-clicked
//! query images of the same novel class.

pub mod clicks;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod interactive;
pub mod mask;
pub mod model;
pub mod par;
pub mod rgb;
pub mod trainer;

pub use error::{Error, Result};
pub use mask::{LabelMap, Mask};
pub use rgb::RgbImage;
