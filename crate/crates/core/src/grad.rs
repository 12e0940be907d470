//! Analytic Jacobians of the keypoint projection and the finite-difference
//! checker every exposed gradient is tested against.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::camera::{CameraModel, ImagePoint};
use crate::geom::{KinematicChain, VirtualJointSet};
use crate::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Floor added to the denominator of the relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-12;

/// A scalar value with gradients for named parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub value: f64,
    pub grads: BTreeMap<String, DVector<f64>>,
}

impl GradientRecord {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
        }
    }

    pub fn with(mut self, block: impl Into<String>, grad: DVector<f64>) -> Self {
        self.grads.insert(block.into(), grad);
        self
    }

    pub fn grad(&self, block: &str) -> Option<&DVector<f64>> {
        self.grads.get(block)
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Projected virtual joints together with their first derivatives.
#[derive(Debug, Clone)]
pub struct ProjectionLinearization {
    pub points: Vec<ImagePoint>,
    /// `d s_k / d phi_k`, one 3x3 block per keypoint.
    pub d_phi: Vec<Matrix3<f64>>,
    /// `d s / d theta`, `3K x dof`, rows ordered `(x_0, y_0, d_0, x_1, ...)`.
    pub d_theta: DMatrix<f64>,
}

/// Projects the virtual joints and differentiates w.r.t. `phi` and `theta`.
///
/// A revolute joint with base-frame axis `a` through `o` moves a rigidly
/// attached point `p` with velocity `a x (p - o)`; the projection Jacobian maps
/// that onto image and depth.
pub fn linearize_projection(
    cam: &CameraModel,
    chain: &KinematicChain,
    theta: &[f64],
    phi: &VirtualJointSet,
) -> Result<ProjectionLinearization> {
    let pose = chain.pose(theta)?;
    let ee = pose.ee();
    let r_ee = ee.rotation_matrix();
    let k = phi.len();
    let mut points = Vec::with_capacity(k);
    let mut d_phi = Vec::with_capacity(k);
    let mut d_theta = DMatrix::zeros(3 * k, chain.dof());
    for (i, offset) in phi.iter().enumerate() {
        let p = ee.transform_point(offset);
        let pc = cam.to_camera_frame(&p);
        let ip = cam.project_camera_point(&pc).map_err(|_| Error::KeypointBehindCamera {
            keypoint: i,
            depth: pc.z,
        })?;
        let j_point = cam.camera_point_jacobian(&pc)? * cam.extrinsic().rotation_matrix();
        for joint in pose.ee_joints() {
            let v = joint.axis.cross(&(p - joint.origin));
            d_theta
                .fixed_view_mut::<3, 1>(3 * i, joint.dof_index)
                .copy_from(&(j_point * v));
        }
        points.push(ip);
        d_phi.push(j_point * r_ee);
    }
    Ok(ProjectionLinearization { points, d_phi, d_theta })
}

/// `d(x_k, y_k, depth_k) / d phi`, `3K x 3K`, block diagonal in `k`.
pub fn projection_jacobian_wrt_phi(
    cam: &CameraModel,
    chain: &KinematicChain,
    theta: &[f64],
    phi: &VirtualJointSet,
) -> Result<DMatrix<f64>> {
    let lin = linearize_projection(cam, chain, theta, phi)?;
    let k = phi.len();
    let mut jac = DMatrix::zeros(3 * k, 3 * k);
    for (i, block) in lin.d_phi.iter().enumerate() {
        jac.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(block);
    }
    Ok(jac)
}

/// `d(x_k, y_k, depth_k) / d theta`, `3K x dof`.
pub fn projection_jacobian_wrt_theta(
    cam: &CameraModel,
    chain: &KinematicChain,
    theta: &[f64],
    phi: &VirtualJointSet,
) -> Result<DMatrix<f64>> {
    Ok(linearize_projection(cam, chain, theta, phi)?.d_theta)
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Central-difference gradient of a scalar function.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = finite(f(&probe)?, "finite-difference probe")?;
            probe[i] = x[i] - h;
            let minus = finite(f(&probe)?, "finite-difference probe")?;
            probe[i] = x[i];
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Central-difference Jacobian of a vector function, `outputs x inputs`.
pub fn central_difference_jacobian<F>(mut f: F, x: &[f64], h: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut probe = x.to_vec();
    let mut columns = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("finite-difference probe".into()));
        }
        columns.push(DVector::from_iterator(
            plus.len(),
            plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)),
        ));
    }
    Ok(DMatrix::from_columns(&columns))
}

/// Multiple of the central-difference rounding bound `eps * |f_i| / h` that
/// Jacobian entries may differ by before counting as error. Structurally zero
/// entries otherwise score the rounding noise itself.
pub const ROUNDING_SLACK: f64 = 100.0;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + RELATIVE_ERROR_FLOOR)
}

/// Rounding bound of a central difference of a function with magnitude `value`.
pub fn rounding_bound(value: f64, h: f64) -> f64 {
    ROUNDING_SLACK * f64::EPSILON * value.abs() / h
}

/// Relative error of one Jacobian entry after discounting `rounding`.
pub fn jacobian_entry_error(analytic: f64, numeric: f64, rounding: f64) -> f64 {
    ((analytic - numeric).abs() - rounding).max(0.0) / (numeric.abs() + RELATIVE_ERROR_FLOOR)
}

/// Maximum relative error between the analytic gradient returned by `f` at
/// `x` and central differences of its value, after discounting the rounding
/// bound of the value.
///
/// `f` returns `(value, gradient)`; only its value is used at the probes.
pub fn finite_difference_check<F>(mut f: F, x: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (value, analytic) = f(x)?;
    finite(value, "function value")?;
    if analytic.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient length",
            expected: x.len(),
            actual: analytic.len(),
        });
    }
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let numeric = central_difference(|p| f(p).map(|(v, _)| v), x, h)?;
    let rounding = rounding_bound(value, h);
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| jacobian_entry_error(a, n, rounding))
        .fold(0.0, f64::max))
}

/// Maximum entry-wise relative error between `analytic` and the
/// central-difference Jacobian of `f` at `x`, after discounting each row's
/// rounding bound.
pub fn jacobian_check<F>(mut f: F, analytic: &DMatrix<f64>, x: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let values = f(x)?;
    let numeric = central_difference_jacobian(f, x, h)?;
    if numeric.shape() != analytic.shape() {
        return Err(Error::DimensionMismatch {
            what: "Jacobian entry count",
            expected: numeric.len(),
            actual: analytic.len(),
        });
    }
    let mut worst = 0.0f64;
    for r in 0..numeric.nrows() {
        let rounding = rounding_bound(values[r], h);
        for c in 0..numeric.ncols() {
            worst = worst.max(jacobian_entry_error(analytic[(r, c)], numeric[(r, c)], rounding));
        }
    }
    Ok(worst)
}

/// `(x, y, depth)` of every point, concatenated.
pub fn flatten_points(points: &[ImagePoint]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.depth]).collect()
}
