//! Trajectory selection for region-of-interest cone-beam tomography.
//!
//! Candidate X-ray source positions are scored by how well they cover a
//! sphere of ray directions around a region of interest, after removing
//! sources whose projection is clipped or dominated by attenuation.

pub mod config;
pub mod coverage;
pub mod error;
pub mod esr;
pub mod exact;
pub mod geometry;
pub mod greedy;
pub mod harness;
pub mod metrics;
pub mod multi_roi;
pub mod objective;
pub mod pipeline;
pub mod scene;
pub mod stats;
pub mod validity;

pub use error::{Error, Result};
