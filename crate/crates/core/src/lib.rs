//! Overlap-aware registration of low-overlap point cloud pairs.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{NeighborGraph, Point, PointCloud, RigidTransform};
