//! Joint 6D object pose and focal length refinement without the learned part.
//!
//! The crate provides the pieces of a render-and-compare refinement loop that
//! can be written down exactly:
//!
//! - [`geometry`]: pinhole projection, rotations, boxes and the crop protocol.
//! - [`update`]: the parameter update applied after every prediction, the older
//!   approximate translation rule, and the exact inverse used as an oracle.
//! - [`losses`]: training losses with analytic gradients and a finite-difference
//!   checker.
//! - [`sampling`]: Bingham, Gaussian, uniform and nonparametric pose/focal
//!   distributions for synthetic data.
//! - [`metrics`]: rotation, translation, pose, focal, reprojection and detection
//!   errors with median/accuracy aggregation.
//! - [`simulator`]: the closed refinement loop driven by pluggable predictors.
//! - [`io`]: file formats shared by the command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod sampling;
pub mod simulator;
pub mod update;

pub use error::{Error, Result};
pub use geometry::{BBox, CameraIntrinsics, ModelPoints, ParamState, Rotation};
pub use update::{DeltaTheta, UpdateRule};

/// Seeded generator used by every sampler and by the simulator.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Generator for stream `index` derived from a base seed.
///
/// Streams are split as `seed + index` (wrapping), so worker `i` of a run with
/// seed `s` always sees the same numbers regardless of thread count.
pub fn rng_for(seed: u64, index: u64) -> SimRng {
    use rand::SeedableRng;
    SimRng::seed_from_u64(seed.wrapping_add(index))
}
