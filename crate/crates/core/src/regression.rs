//! Virtual-joint regression: fit the translation offsets `phi` so projected
//! virtual joints match observed keypoints.

use std::path::Path;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, Keypoint};
use crate::geom::{KinematicChain, VirtualJointSet};
use crate::grad::{linearize_projection, GradientRecord};
use crate::keypoint::ObservationDataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    PlainGd,
    Adam,
}

/// How residual components are weighted before squaring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualScaling {
    /// Pixel residuals divided by the focal length, depth in meters.
    Normalized,
    /// Pixels and meters summed as they are.
    Raw,
}

impl ResidualScaling {
    pub fn factors(&self, cam: &CameraModel) -> [f64; 3] {
        match self {
            Self::Normalized => [1.0 / cam.intrinsics().fx, 1.0 / cam.intrinsics().fy, 1.0],
            Self::Raw => [1.0; 3],
        }
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.5;
pub const DEFAULT_MAX_STEPS: usize = 2000;
pub const DEFAULT_TOL: f64 = 1e-10;
/// Consecutive halvings tried before a step is declared stalled.
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub tol: f64,
    pub optimizer: Optimizer,
    /// Starting offsets; zeros when `None`.
    pub init_phi: Option<VirtualJointSet>,
    pub scaling: ResidualScaling,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            max_steps: DEFAULT_MAX_STEPS,
            tol: DEFAULT_TOL,
            optimizer: Optimizer::PlainGd,
            init_phi: None,
            scaling: ResidualScaling::Normalized,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tol must be non-negative, got {}",
                self.tol
            )));
        }
        Ok(())
    }

    /// Noisy-data stopping threshold `3 K sigma^2`, in the units of `scaling`.
    pub fn noisy_tol(k: usize, pixel_sigma: f64, cam: &CameraModel, scaling: ResidualScaling) -> f64 {
        let [sx, _, _] = scaling.factors(cam);
        3.0 * k as f64 * (pixel_sigma * sx).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Tolerance,
    MaxSteps,
    /// No decreasing step found by halving; the loss is at its numerical floor.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionResult {
    pub phi: VirtualJointSet,
    pub initial_loss: f64,
    /// Objective after each accepted step.
    pub loss_history: Vec<f64>,
    /// `phi` before the first step and after every step.
    pub phi_trace: Vec<VirtualJointSet>,
    pub steps_taken: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
}

impl RegressionResult {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(self.initial_loss)
    }

    /// `||phi_t - truth||^2` for every entry of the trace.
    pub fn squared_error_curve(&self, truth: &VirtualJointSet) -> Vec<f64> {
        self.phi_trace.iter().map(|p| p.squared_distance(truth)).collect()
    }
}

fn check_count(phi: &VirtualJointSet, z_obs: &[Keypoint]) -> Result<()> {
    if phi.len() != z_obs.len() {
        return Err(Error::DimensionMismatch {
            what: "keypoint observations",
            expected: phi.len(),
            actual: z_obs.len(),
        });
    }
    Ok(())
}

/// Weighted squared residuals `sum_k sum_c (f_c (s_kc - z_kc))^2` with their
/// gradient w.r.t. flattened `phi` (block `"phi"`).
pub fn loss_trans_scaled(
    cam: &CameraModel,
    chain: &KinematicChain,
    theta: &[f64],
    phi: &VirtualJointSet,
    z_obs: &[Keypoint],
    factors: [f64; 3],
) -> Result<GradientRecord> {
    check_count(phi, z_obs)?;
    let lin = linearize_projection(cam, chain, theta, phi)?;
    let w = Vector3::from(factors.map(|f| f * f));
    let mut value = 0.0;
    let mut grad = DVector::zeros(3 * phi.len());
    for (k, (s, z)) in lin.points.iter().zip(z_obs).enumerate() {
        let r = s.to_vector() - z.to_vector();
        let wr = r.component_mul(&w);
        value += r.dot(&wr);
        grad.fixed_rows_mut::<3>(3 * k)
            .copy_from(&(2.0 * lin.d_phi[k].transpose() * wr));
    }
    Ok(GradientRecord::new(value).with("phi", grad))
}

/// Sum of squared residuals between projected virtual joints and observations.
pub fn loss_trans(
    cam: &CameraModel,
    chain: &KinematicChain,
    theta: &[f64],
    phi: &VirtualJointSet,
    z_obs: &[Keypoint],
) -> Result<GradientRecord> {
    loss_trans_scaled(cam, chain, theta, phi, z_obs, [1.0; 3])
}

/// Mean of `loss_trans_scaled` over dataset records, with gradient.
pub fn dataset_objective(
    data: &ObservationDataset,
    cam: &CameraModel,
    chain: &KinematicChain,
    phi: &VirtualJointSet,
    scaling: ResidualScaling,
) -> Result<(f64, DVector<f64>)> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("regression dataset is empty".into()));
    }
    let factors = scaling.factors(cam);
    let mut value = 0.0;
    let mut grad = DVector::zeros(3 * phi.len());
    for r in &data.records {
        let rec = loss_trans_scaled(cam, chain, &r.theta, phi, &r.keypoints, factors)?;
        value += rec.value;
        grad += &rec.grads["phi"];
    }
    let n = data.len() as f64;
    Ok((value / n, grad / n))
}

fn apply(phi: &VirtualJointSet, step: &DVector<f64>) -> Result<VirtualJointSet> {
    let flat: Vec<f64> = phi.to_flat().iter().zip(step.iter()).map(|(p, s)| p - s).collect();
    VirtualJointSet::from_flat(&flat)
}

struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, grad: &DVector<f64>, lr: f64) -> DVector<f64> {
        self.t += 1;
        self.m = Self::BETA1 * &self.m + (1.0 - Self::BETA1) * grad;
        self.v = Self::BETA2 * &self.v + (1.0 - Self::BETA2) * grad.component_mul(grad);
        let mc = 1.0 - Self::BETA1.powi(self.t);
        let vc = 1.0 - Self::BETA2.powi(self.t);
        self.m
            .zip_map(&self.v, |m, v| lr * (m / mc) / ((v / vc).sqrt() + Self::EPS))
    }
}

/// Full-batch regression of `phi` from a keypoint dataset.
///
/// Plain gradient descent halves its step until the loss does not increase,
/// so the loss history is non-increasing.
pub fn regress(
    data: &ObservationDataset,
    cam: &CameraModel,
    chain: &KinematicChain,
    cfg: &RegressionConfig,
) -> Result<RegressionResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("regression dataset is empty".into()));
    }
    let k = data.keypoint_count();
    let mut phi = match &cfg.init_phi {
        Some(p) => {
            check_count(p, &data.records[0].keypoints)?;
            p.clone()
        }
        None => VirtualJointSet::zeros(k),
    };
    let (mut loss, mut grad) = dataset_objective(data, cam, chain, &phi, cfg.scaling)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss });
    }
    let initial_loss = loss;
    let mut loss_history = Vec::new();
    let mut phi_trace = vec![phi.clone()];
    let mut lr = cfg.learning_rate;
    let mut adam = Adam {
        m: DVector::zeros(3 * k),
        v: DVector::zeros(3 * k),
        t: 0,
    };
    let mut stop_reason = StopReason::MaxSteps;
    for step in 1..=cfg.max_steps {
        if loss <= cfg.tol {
            stop_reason = StopReason::Tolerance;
            break;
        }
        let next = match cfg.optimizer {
            Optimizer::Adam => {
                let candidate = apply(&phi, &adam.step(&grad, lr))?;
                let (l, g) = dataset_objective(data, cam, chain, &candidate, cfg.scaling)?;
                if !l.is_finite() {
                    return Err(Error::Divergence { step, loss: l });
                }
                Some((candidate, l, g))
            }
            Optimizer::PlainGd => {
                let mut accepted = None;
                for _ in 0..MAX_HALVINGS {
                    let candidate = apply(&phi, &(lr * &grad))?;
                    // A trial that leaves the image plane counts as an increase.
                    if let Ok((l, g)) = dataset_objective(data, cam, chain, &candidate, cfg.scaling) {
                        if l.is_finite() && l <= loss {
                            accepted = Some((candidate, l, g));
                            break;
                        }
                    }
                    lr *= 0.5;
                }
                accepted
            }
        };
        let Some((candidate, l, g)) = next else {
            stop_reason = StopReason::Stalled;
            break;
        };
        phi = candidate;
        loss = l;
        grad = g;
        loss_history.push(loss);
        phi_trace.push(phi.clone());
    }
    if loss <= cfg.tol {
        stop_reason = StopReason::Tolerance;
    }
    Ok(RegressionResult {
        phi,
        initial_loss,
        steps_taken: loss_history.len(),
        loss_history,
        phi_trace,
        converged: stop_reason == StopReason::Tolerance,
        stop_reason,
    })
}

/// Re-regression after a new grasp, warm-started from the previous estimate.
pub fn regrasp_adapt(
    prev: &RegressionResult,
    new_dataset: &ObservationDataset,
    cam: &CameraModel,
    chain: &KinematicChain,
    cfg: &RegressionConfig,
) -> Result<RegressionResult> {
    let cfg = RegressionConfig {
        init_phi: Some(prev.phi.clone()),
        ..cfg.clone()
    };
    regress(new_dataset, cam, chain, &cfg)
}

/// On-disk summary of a regression run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub schema_version: u32,
    /// Recovered offsets in meters, one row per virtual joint.
    pub phi: Vec<[f64; 3]>,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub steps_taken: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl RegressionReport {
    pub fn from_result(result: &RegressionResult) -> Self {
        Self {
            schema_version: crate::config::SCHEMA_VERSION,
            phi: result.phi.iter().map(|p| [p.x, p.y, p.z]).collect(),
            converged: result.converged,
            stop_reason: result.stop_reason,
            steps_taken: result.steps_taken,
            initial_loss: result.initial_loss,
            final_loss: result.final_loss(),
        }
    }

    pub fn phi(&self) -> Result<VirtualJointSet> {
        let phi = VirtualJointSet::new(self.phi.iter().map(|&p| p.into()).collect());
        if phi.is_empty() {
            return Err(Error::InvalidConfig("regression report has no virtual joints".into()));
        }
        Ok(phi)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{source}: {e}"))))?;
        let report: Self = toml::from_str(&text).map_err(|e| Error::parse(&source, e))?;
        if report.schema_version != crate::config::SCHEMA_VERSION {
            return Err(Error::parse(
                &source,
                format!("unsupported schema_version {}", report.schema_version),
            ));
        }
        Ok(report)
    }
}
