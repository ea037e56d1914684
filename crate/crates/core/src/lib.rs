//! Recover a 3D arrangement of known objects from 2D keypoint correspondences
//! against a single layout image.
//!
//! The pipeline runs per-object PnP with RANSAC to initialise each pose, then
//! refines all poses jointly with a shared floor plane and an anti-collision
//! penalty ([`sipnp`]). [`arrange`] strings the stages together, including the
//! iterative pair-merging mode and the simple baseline layouts, and [`synth`]
//! generates ground-truth scenes for testing.

pub mod arrange;
pub mod error;
pub mod geom;
pub mod matching;
pub mod pnp;
pub mod sipnp;
pub mod synth;
pub mod tol;

pub use error::{Error, Result};
pub use geom::{CameraIntrinsics, HomPoint, PixelPoint, Plane, RigidTransform, UnitQuaternion, Vec3};
