//! Fan-beam CT simulation and dual-domain learned reconstruction for
//! low-dose interior tomography.

pub mod error;
pub mod geometry;
pub mod io;
pub mod projector;
pub mod acquisition;
pub mod nn;
pub mod pipelines;
pub mod diagnostics;
pub mod baselines;

pub use error::{Error, Result};
pub use geometry::{FanBeamGeometry, ImageGrid, ImageMask, ProjectionMask};
pub use io::Container;
pub use pipelines::{ArchitectureKind, TrainConfig, TrainedModel};
pub use projector::{Image, Sinogram};
