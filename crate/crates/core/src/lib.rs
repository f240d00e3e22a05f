//! Decomposes a scalar target volume into the part a multi-channel feature
//! volume can explain and an orthogonal residual.
//!
//! A sinusoidal implicit network regresses the target from per-voxel feature
//! vectors. Its residual is split by projecting onto the column space of the
//! feature matrix, and the parallel part is penalized during training so
//! that what the features cannot explain ends up orthogonal to them.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod inr;
pub mod kinetics;
mod linalg;
pub mod numeric;
pub mod phantom;
pub mod preprocess;
pub mod projection;
pub mod selftest;
pub mod volumes;

pub use error::{Error, Result};
