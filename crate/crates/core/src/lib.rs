//! Differentiable kinematic chains extended with virtual joints.
//!
//! A robot arm's serial chain is augmented with translation-only virtual
//! links attached at the end-effector, one per tracked visual keypoint. The
//! virtual link offsets are regressed from `(pixel x, pixel y, depth)`
//! keypoint observations by gradient descent, and the extended chain is then
//! used as a predictive model for gradient-based action optimization in
//! keypoint space.
//!
//! Module map:
//!
//! - [`geom`]: rigid transforms, links and the serial chain
//! - [`camera`]: pinhole projection into image + depth space
//! - [`grad`]: analytic Jacobians and the finite-difference checker
//! - [`keypoint`]: oracle keypoint observer, heatmaps, datasets
//! - [`regression`]: virtual joint estimation
//! - [`mpc`]: rollout, keypoint cost and action optimization
//! - [`baseline`]: neural keypoint dynamics baselines
//! - [`config`]: chain, camera and scenario files; the default scene

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod camera;
pub mod config;
pub mod geom;
pub mod grad;
pub mod keypoint;
pub mod mpc;
pub mod regression;
pub mod seed;

pub use camera::{project_chain, CameraModel, ImagePoint, Intrinsics};
pub use geom::{JointType, KinematicChain, Link, RigidTransform, VirtualJointSet, VirtualLink};
pub use grad::GradientRecord;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("point is behind the camera (camera-frame z = {depth:.6e})")]
    BehindCamera { depth: f64 },

    #[error("keypoint {keypoint} is behind the camera (camera-frame z = {depth:.6e})")]
    KeypointBehindCamera { keypoint: usize, depth: f64 },

    #[error("rollout step {step}: keypoint {keypoint} is behind the camera")]
    BehindCameraAtStep { step: usize, keypoint: usize },

    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("optimization diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("could not draw {wanted} in-view samples within {attempts} attempts; joint ranges {ranges}")]
    RejectionBound {
        wanted: usize,
        attempts: usize,
        ranges: String,
    },

    #[error("grid size mismatch: {0}x{1} vs {2}x{3}")]
    GridSizeMismatch(usize, usize, usize, usize),

    #[error("parse error in {source_name}: {message}")]
    Parse { source_name: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(source_name: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            message: message.to_string(),
        }
    }
}
