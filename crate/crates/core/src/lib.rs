//! Relation-aware alignment for multi-object tracking.

pub mod assignment;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod matrix;
pub mod neural;
pub mod ram;
pub mod tracking;

pub use error::{Error, Result};
pub use geometry::{BBox, FrameSize};
pub use matrix::Matrix;
