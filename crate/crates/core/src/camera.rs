//! Pinhole projection into `(pixel x, pixel y, depth)` observation space.
//!
//! Depth is the camera-frame z coordinate, not the ray length. There is no
//! lens distortion and coordinates are continuous (sub-pixel).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::{KinematicChain, RigidTransform, VirtualJointSet};
use crate::{Error, Result};

/// Points with camera-frame z at or below this value count as behind the camera.
pub const MIN_CAMERA_Z: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// A keypoint or projected point: pixel coordinates plus depth in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImagePoint {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

/// Visual keypoint observation `z_k`; same layout as a projected point.
pub type Keypoint = ImagePoint;

impl ImagePoint {
    pub fn new(x: f64, y: f64, depth: f64) -> Self {
        Self { x, y, depth }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.depth)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn pixel_distance(&self, other: &ImagePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    /// Maps base-frame points into the camera frame.
    extrinsic: RigidTransform,
    intrinsics: Intrinsics,
    width: u32,
    height: u32,
}

impl CameraModel {
    pub fn new(extrinsic: RigidTransform, intrinsics: Intrinsics, width: u32, height: u32) -> Result<Self> {
        let Intrinsics { fx, fy, cx, cy } = intrinsics;
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0..f64::from(width)).contains(&cx) || !(0.0..f64::from(height)).contains(&cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside the {width}x{height} image"
            )));
        }
        Ok(Self {
            extrinsic,
            intrinsics,
            width,
            height,
        })
    }

    pub fn extrinsic(&self) -> &RigidTransform {
        &self.extrinsic
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn to_camera_frame(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsic.transform_point(p)
    }

    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Result<ImagePoint> {
        if !(pc.z > MIN_CAMERA_Z) {
            return Err(Error::BehindCamera { depth: pc.z });
        }
        let Intrinsics { fx, fy, cx, cy } = self.intrinsics;
        Ok(ImagePoint {
            x: fx * (pc.x / pc.z) + cx,
            y: fy * (pc.y / pc.z) + cy,
            depth: pc.z,
        })
    }

    /// Projects a base-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<ImagePoint> {
        self.project_camera_point(&self.to_camera_frame(p))
    }

    /// Camera-frame point that projects to `ip`.
    pub fn unproject(&self, ip: &ImagePoint) -> Vector3<f64> {
        let Intrinsics { fx, fy, cx, cy } = self.intrinsics;
        Vector3::new((ip.x - cx) / fx * ip.depth, (ip.y - cy) / fy * ip.depth, ip.depth)
    }

    /// `d(x, y, depth) / d(camera-frame point)`.
    pub fn camera_point_jacobian(&self, pc: &Vector3<f64>) -> Result<Matrix3<f64>> {
        if !(pc.z > MIN_CAMERA_Z) {
            return Err(Error::BehindCamera { depth: pc.z });
        }
        let Intrinsics { fx, fy, .. } = self.intrinsics;
        let iz = 1.0 / pc.z;
        Ok(Matrix3::new(
            fx * iz,
            0.0,
            -fx * pc.x * iz * iz,
            0.0,
            fy * iz,
            -fy * pc.y * iz * iz,
            0.0,
            0.0,
            1.0,
        ))
    }

    /// `d(x, y, depth) / d(base-frame point)`.
    pub fn point_jacobian(&self, p: &Vector3<f64>) -> Result<Matrix3<f64>> {
        let pc = self.to_camera_frame(p);
        Ok(self.camera_point_jacobian(&pc)? * self.extrinsic.rotation_matrix())
    }

    /// Whether the point lies inside the image and within `[min_depth, max_depth]`.
    pub fn contains(&self, ip: &ImagePoint, min_depth: f64, max_depth: f64) -> bool {
        ip.x >= 0.0
            && ip.y >= 0.0
            && ip.x < f64::from(self.width)
            && ip.y < f64::from(self.height)
            && ip.depth >= min_depth
            && ip.depth <= max_depth
    }
}

fn tag_keypoint(k: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::BehindCamera { depth } => Error::KeypointBehindCamera { keypoint: k, depth },
        other => other,
    }
}

/// Projects every virtual joint of the extended chain, in `phi` order.
pub fn project_chain(
    cam: &CameraModel,
    chain: &KinematicChain,
    theta: &[f64],
    phi: &VirtualJointSet,
) -> Result<Vec<ImagePoint>> {
    chain
        .virtual_link_positions(theta, phi)?
        .iter()
        .enumerate()
        .map(|(k, p)| cam.project(p).map_err(tag_keypoint(k)))
        .collect()
}

/// Projects the end-effector origin.
pub fn project_ee(cam: &CameraModel, chain: &KinematicChain, theta: &[f64]) -> Result<ImagePoint> {
    cam.project(chain.ee_pose(theta)?.translation())
}
