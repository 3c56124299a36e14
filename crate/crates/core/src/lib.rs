//! Globally consistent 3D crowd localization in large-scene images.
//!
//! The crate turns 2D person annotations of one large image into absolute 3D
//! torso positions in the scene camera frame:
//!
//! 1. [`cropping`] splits the image into patches whose size follows the
//!    pyramid-like growth of people toward the bottom of the frame.
//! 2. [`calibration`] estimates the focal length and ground plane from people
//!    standing upright.
//! 3. [`hvip`] lifts each person's torso pixel and its ground-projection pixel
//!    to 3D through the ground plane.
//! 4. [`merging`] removes duplicates seen in overlapping patches.
//! 5. [`metrics`] scores reconstructions against ground truth.
//!
//! [`simulate`] generates synthetic scenes with exact ground truth and
//! [`pipeline`] ties the stages together with the file formats in [`formats`].

pub mod calibration;
pub mod cropping;
pub mod error;
pub mod formats;
pub mod geometry;
pub mod hvip;
pub mod merging;
pub mod metrics;
pub mod optimize;
pub mod pipeline;
pub mod simulate;
pub mod skeleton;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, GroundPlane, Pixel, Point3, Vec3};
