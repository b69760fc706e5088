//! Closed-loop particle/splat simulator: a unified visual-physical particle
//! representation, multi-material forward solvers, a time-conditioned splat
//! renderer, and a multi-view backward optimizer with a pluggable refiner.

pub mod checkpoint;
pub mod error;
pub mod math;
pub mod optimize;
pub mod physics;
pub mod pipeline;
pub mod refiner;
pub mod render;
pub mod scenario;
pub mod vpp;

pub use error::{Result, VppError};
