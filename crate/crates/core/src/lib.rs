//! Dual-branch temporal action localisation over pre-extracted clip features.
//!
//! An anchor-free branch predicts boundary distances per location, an
//! anchor-based branch refines one default anchor per location, and the two
//! sets of detections are merged at inference time.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod targets;
pub mod train;

pub use error::{Error, Result};
