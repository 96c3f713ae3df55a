//! Few-shot object detection with a small FPN Faster R-CNN and multi-scale
//! positive sample refinement.

pub mod benchmark;
pub mod checkpoint;
pub mod datamodel;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod geometry;
pub mod losses;
pub mod mpsr;
pub mod nn;
pub mod raster;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
