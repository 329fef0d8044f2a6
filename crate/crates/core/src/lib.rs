//! Marker-based deformable target tracking and closed-loop needle guidance.

pub mod blobdetect;
pub mod correspond;
pub mod geom;
pub mod register;
pub mod guidance;
pub mod stats;
pub mod phantomsim;
pub mod pipeline;
pub mod harness;
pub mod session;
