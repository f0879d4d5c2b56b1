//! Geometry, warping and loss machinery for cross-view-consistent
//! self-supervised surround depth estimation.
//!
//! Everything operates on explicit per-pixel grids and rigid transforms; an
//! analytic planar-scene renderer ([`synth`]) provides ground truth, and
//! [`optimize`] recovers depth maps by gradient descent on the full loss with
//! hand-written adjoints ([`grad`]).

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod grad;
pub mod imaging;
pub mod losses;
pub mod optimize;
pub mod rig;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
pub use imaging::{DepthMap, Grid, Image, Mask, Rgb};
pub use rig::{CameraRig, Intrinsics, RigidTransform, Twist};
