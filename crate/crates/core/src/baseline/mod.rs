//! Neural keypoint-dynamics baseline `s_{t+1} = g_beta(s_t, u_t)` with
//! `s = [theta, z]`, trained on sine-motion data and compared against the
//! extended kinematic chain over long horizons.

pub mod mlp;

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use mlp::{Activation, Init, MlpModel, Normalization};

use crate::camera::{project_chain, CameraModel, ImagePoint, Keypoint, MIN_CAMERA_Z};
use crate::geom::{KinematicChain, VirtualJointSet};
use crate::keypoint::{KeypointBias, OracleDetector};
use crate::mpc::{
    optimize_with, pixel_rmse, rollout, ActionSequence, GoalSpec, Predictor, Scenario, TaskReport, Trajectory,
    TrajectoryState,
};
use crate::seed::rng;
use crate::{Error, Result};

/// Per-joint sinusoids `center + amplitude * sin(2 pi f t dt + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineMotion {
    pub center: Vec<f64>,
    pub amplitude: Vec<f64>,
    /// Hz.
    pub frequency: Vec<f64>,
    pub phase: Vec<f64>,
    /// Seconds per step.
    pub dt: f64,
}

impl SineMotion {
    pub fn theta(&self, step: usize) -> Vec<f64> {
        let time = step as f64 * self.dt;
        (0..self.center.len())
            .map(|j| self.center[j] + self.amplitude[j] * (TAU * self.frequency[j] * time + self.phase[j]).sin())
            .collect()
    }

    fn validate(&self, dof: usize) -> Result<()> {
        let lens = [
            self.center.len(),
            self.amplitude.len(),
            self.frequency.len(),
            self.phase.len(),
        ];
        if lens.iter().any(|&l| l != dof) {
            return Err(Error::InvalidConfig(format!(
                "sine motion needs {dof} entries per field, got {lens:?}"
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("sine motion dt must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynRecord {
    pub theta: Vec<f64>,
    pub u: Vec<f64>,
    pub z: Vec<Keypoint>,
    pub theta_next: Vec<f64>,
    pub z_next: Vec<Keypoint>,
}

/// Consecutive transitions of one motion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DynDataset {
    pub records: Vec<DynRecord>,
}

impl DynDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.records.first().map_or(0, |r| r.theta.len())
    }

    pub fn keypoint_count(&self) -> usize {
        self.records.first().map_or(0, |r| r.z.len())
    }

    /// CSV with one row per transition.
    pub fn to_csv(&self) -> String {
        let (dof, k) = (self.dof(), self.keypoint_count());
        let mut header = vec!["t".to_string()];
        for prefix in ["theta", "u", "theta_next"] {
            header.extend((0..dof).map(|j| format!("{prefix}_{j}")));
        }
        for prefix in ["kp", "kp_next"] {
            for i in 0..k {
                header.extend(["x", "y", "d"].map(|c| format!("{prefix}{i}_{c}")));
            }
        }
        let mut out = header.join(",");
        out.push('\n');
        let f = crate::keypoint::format_float;
        for (t, r) in self.records.iter().enumerate() {
            let mut row = vec![t.to_string()];
            for v in r.theta.iter().chain(&r.u).chain(&r.theta_next) {
                row.push(f(*v));
            }
            for p in r.z.iter().chain(&r.z_next) {
                row.extend([f(p.x), f(p.y), f(p.depth)]);
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Samples a sine motion for `n` transitions and observes it with `det`.
pub fn gen_sine_data(
    chain: &KinematicChain,
    cam: &CameraModel,
    det: &mut OracleDetector,
    n: usize,
    motion: &SineMotion,
) -> Result<DynDataset> {
    motion.validate(chain.dof())?;
    let mut thetas: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut actions = Vec::with_capacity(n);
    let mut observations = Vec::with_capacity(n + 1);
    for step in 0..=n {
        // Integrate the deltas so theta_t + u_t reproduces theta_{t+1} exactly.
        let theta = match thetas.last() {
            None => motion.theta(0),
            Some(prev) => {
                let u: Vec<f64> = motion.theta(step).iter().zip(prev).map(|(a, b)| a - b).collect();
                let next = prev.iter().zip(&u).map(|(a, b)| a + b).collect();
                actions.push(u);
                next
            }
        };
        let exact = project_chain(cam, chain, &theta, det.truth())?;
        if let Some(k) = exact.iter().position(|p| !cam.contains(p, MIN_CAMERA_Z, f64::INFINITY)) {
            return Err(Error::InvalidConfig(format!(
                "sine motion leaves the image at step {step} (keypoint {k})"
            )));
        }
        observations.push(det.observe(cam, chain, &theta)?);
        thetas.push(theta);
    }
    let records = (0..n)
        .map(|t| DynRecord {
            u: actions[t].clone(),
            theta: thetas[t].clone(),
            z: observations[t].clone(),
            theta_next: thetas[t + 1].clone(),
            z_next: observations[t + 1].clone(),
        })
        .collect();
    Ok(DynDataset { records })
}

/// Feature layout of a baseline: state `[theta, z]`, input `[state, u]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub dof: usize,
    pub keypoints: usize,
    /// Whether keypoint depth is part of the state.
    pub depth: bool,
}

impl FeatureLayout {
    pub fn channels(&self) -> usize {
        if self.depth {
            3
        } else {
            2
        }
    }

    pub fn state_dim(&self) -> usize {
        self.dof + self.keypoints * self.channels()
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim() + self.dof
    }

    pub fn state(&self, theta: &[f64], z: &[Keypoint]) -> Vec<f64> {
        let mut s = theta.to_vec();
        for p in z {
            s.extend_from_slice(&[p.x, p.y, p.depth][..self.channels()]);
        }
        s
    }

    pub fn input(&self, state: &[f64], u: &[f64]) -> Vec<f64> {
        state.iter().chain(u).copied().collect()
    }

    /// Splits a state vector; depth is 0 when the layout has none.
    pub fn split(&self, state: &[f64]) -> (Vec<f64>, Vec<Keypoint>) {
        let c = self.channels();
        let z = state[self.dof..]
            .chunks_exact(c)
            .map(|v| ImagePoint::new(v[0], v[1], if self.depth { v[2] } else { 0.0 }))
            .collect();
        (state[..self.dof].to_vec(), z)
    }
}

/// Data-condition variants of the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineVariant {
    /// 2D keypoints offset from the object.
    A,
    /// 3D keypoints offset from the object.
    B,
    /// 2D keypoints on the object.
    C,
    /// 3D keypoints on the object.
    D,
}

/// Magnitude of the systematic offset of the off-object variants.
pub const DEFAULT_BIAS_PX: f64 = 15.0;

impl BaselineVariant {
    pub const ALL: [BaselineVariant; 4] = [Self::A, Self::B, Self::C, Self::D];

    pub fn id(&self) -> &'static str {
        match self {
            Self::A => "baseline-a",
            Self::B => "baseline-b",
            Self::C => "baseline-c",
            Self::D => "baseline-d",
        }
    }

    pub fn uses_depth(&self) -> bool {
        matches!(self, Self::B | Self::D)
    }

    pub fn bias(&self) -> Option<KeypointBias> {
        matches!(self, Self::A | Self::B).then_some(KeypointBias {
            magnitude_px: DEFAULT_BIAS_PX,
            rate: 1.0,
        })
    }

    pub fn layout(&self, dof: usize, keypoints: usize) -> FeatureLayout {
        FeatureLayout {
            dof,
            keypoints,
            depth: self.uses_depth(),
        }
    }

    /// Oracle producing this variant's training observations.
    pub fn detector(
        &self,
        truth: VirtualJointSet,
        pixel_sigma: f64,
        depth_sigma: f64,
        seed: u64,
    ) -> Result<OracleDetector> {
        let det = OracleDetector::new(truth, pixel_sigma, depth_sigma, seed)?;
        Ok(match self.bias() {
            Some(b) => det.with_bias(b),
            None => det,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init: Init,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Stop once the training loss improved by less than this fraction over
    /// the last `plateau_window` epochs. A window of 0 disables the check.
    pub plateau_tol: f64,
    pub plateau_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            init: Init::Xavier,
            epochs: 2000,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            plateau_tol: 1e-3,
            plateau_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "need learning_rate > 0 and 0 <= momentum < 1, got {} and {}",
                self.learning_rate, self.momentum
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// A trained baseline with the feature layout and observation model it was
/// trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedBaseline {
    pub id: String,
    pub layout: FeatureLayout,
    pub bias: Option<KeypointBias>,
    pub model: MlpModel,
}

#[derive(Debug, Serialize, Deserialize)]
struct BaselineCheckpoint {
    format_version: u32,
    id: String,
    layout: FeatureLayout,
    bias_px: Option<f64>,
    bias_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
    network: mlp::Checkpoint,
}

impl TrainedBaseline {
    pub fn to_checkpoint_json(&self) -> String {
        self.to_checkpoint_json_with(&[])
    }

    /// Checkpoint with free-form provenance entries; ignored on load.
    pub fn to_checkpoint_json_with(&self, metadata: &[(String, String)]) -> String {
        let ck = BaselineCheckpoint {
            format_version: mlp::CHECKPOINT_FORMAT_VERSION,
            id: self.id.clone(),
            layout: self.layout,
            bias_px: self.bias.map(|b| b.magnitude_px),
            bias_rate: self.bias.map(|b| b.rate),
            metadata: metadata.iter().cloned().collect(),
            network: self.model.to_checkpoint(),
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(source: &str, text: &str) -> Result<Self> {
        let ck: BaselineCheckpoint = serde_json::from_str(text).map_err(|e| Error::parse(source, e))?;
        if ck.format_version != mlp::CHECKPOINT_FORMAT_VERSION {
            return Err(Error::parse(
                source,
                format!("unsupported checkpoint version {}", ck.format_version),
            ));
        }
        let model = MlpModel::from_checkpoint(source, ck.network)?;
        if model.input_dim() != ck.layout.input_dim() || model.output_dim() != ck.layout.state_dim() {
            return Err(Error::parse(source, "network size does not match the feature layout"));
        }
        let bias = match (ck.bias_px, ck.bias_rate) {
            (Some(magnitude_px), Some(rate)) => Some(KeypointBias { magnitude_px, rate }),
            _ => None,
        };
        Ok(Self {
            id: ck.id,
            layout: ck.layout,
            bias,
            model,
        })
    }

    /// The baseline's own (possibly biased) noiseless view of the true keypoints.
    pub fn observe_truth(&self, exact: &[Keypoint], theta: &[f64]) -> Vec<Keypoint> {
        let count = exact.len();
        exact
            .iter()
            .enumerate()
            .map(|(k, p)| match self.bias {
                Some(b) => {
                    let (dx, dy) = b.offset(theta, k, count);
                    ImagePoint::new(p.x + dx, p.y + dy, p.depth)
                }
                None => *p,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub baseline: TrainedBaseline,
    /// Per-epoch NMSE on the training and test splits.
    pub train_nmse: Vec<f64>,
    pub test_nmse: Vec<f64>,
    pub epochs_run: usize,
}

impl TrainOutcome {
    pub fn final_test_nmse(&self) -> f64 {
        self.test_nmse.last().copied().unwrap_or(f64::NAN)
    }
}

/// Mean over output dimensions of `MSE_d / Var_d`; zero-variance dimensions
/// are left out.
pub fn nmse(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let n = targets.len() as f64;
    let dim = targets.first().map_or(0, Vec::len);
    let mut total = 0.0;
    let mut used = 0;
    for d in 0..dim {
        let mean = targets.iter().map(|t| t[d]).sum::<f64>() / n;
        let var = targets.iter().map(|t| (t[d] - mean).powi(2)).sum::<f64>() / n;
        if var <= 1e-24 {
            continue;
        }
        let mse = predictions
            .iter()
            .zip(targets)
            .map(|(p, t)| (p[d] - t[d]).powi(2))
            .sum::<f64>()
            / n;
        total += mse / var;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}

fn columns(rows: &[Vec<f64>], idx: &[usize], norm: &Normalization) -> DMatrix<f64> {
    let dim = norm.dim();
    let mut m = DMatrix::zeros(dim, idx.len());
    for (c, &i) in idx.iter().enumerate() {
        m.column_mut(c).copy_from_slice(&norm.normalize(&rows[i]));
    }
    m
}

/// Fits `model` to `(inputs, targets)` rows with mini-batch momentum SGD on
/// the mean squared error in normalized units. Returns per-epoch NMSE on the
/// training and test rows.
pub fn fit_mlp(
    model: &mut MlpModel,
    train: (&[Vec<f64>], &[Vec<f64>]),
    test: (&[Vec<f64>], &[Vec<f64>]),
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (xs, ys) = train;
    cfg.validate()?;
    if xs.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one row".into()));
    }
    model.input_norm = Normalization::fit(xs)?;
    model.output_norm = Normalization::fit(ys)?;
    let mut velocity: Vec<(DMatrix<f64>, DVector<f64>)> = model
        .layers_mut()
        .iter()
        .map(|(w, b)| (DMatrix::zeros(w.nrows(), w.ncols()), DVector::zeros(b.len())))
        .collect();
    let evaluate = |m: &MlpModel, x: &[Vec<f64>], y: &[Vec<f64>]| nmse(&m.predict_rows(x), y);
    let out_dim = model.output_dim() as f64;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let (mut train_curve, mut test_curve) = (Vec::new(), Vec::new());
    let mut epoch_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = columns(xs, batch, &model.input_norm);
            let y = columns(ys, batch, &model.output_norm);
            let acts = model.forward_batch(x);
            let residual = acts.last().unwrap() - &y;
            let scale = 1.0 / (batch.len() as f64 * out_dim);
            epoch_loss += residual.norm_squared() * scale * batch.len() as f64;
            let grads = model.backward_batch(&acts, 2.0 * scale * residual);
            for (((w, b), (vw, vb)), (gw, gb)) in model.layers_mut().iter_mut().zip(&mut velocity).zip(grads) {
                *vw = cfg.momentum * &*vw - cfg.learning_rate * gw;
                *vb = cfg.momentum * &*vb - cfg.learning_rate * gb;
                *w += &*vw;
                *b += &*vb;
            }
        }
        epoch_loss /= xs.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence {
                step: epoch,
                loss: epoch_loss,
            });
        }
        epoch_losses.push(epoch_loss);
        train_curve.push(evaluate(model, xs, ys));
        test_curve.push(if test.0.is_empty() {
            f64::NAN
        } else {
            evaluate(model, test.0, test.1)
        });
        let w = cfg.plateau_window;
        if w > 0 && epoch_losses.len() > w {
            let before = epoch_losses[epoch_losses.len() - 1 - w];
            if before - epoch_loss < cfg.plateau_tol * before {
                break;
            }
        }
    }
    Ok((train_curve, test_curve))
}

/// Trains one baseline on `data` with an 80/20 contiguous train/test split.
pub fn train_dynamics(
    data: &DynDataset,
    variant: BaselineVariant,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if data.len() < 5 {
        return Err(Error::InvalidConfig(format!(
            "need at least 5 transitions, got {}",
            data.len()
        )));
    }
    let layout = variant.layout(data.dof(), data.keypoint_count());
    let inputs: Vec<Vec<f64>> = data
        .records
        .iter()
        .map(|r| layout.input(&layout.state(&r.theta, &r.z), &r.u))
        .collect();
    let targets: Vec<Vec<f64>> = data
        .records
        .iter()
        .map(|r| layout.state(&r.theta_next, &r.z_next))
        .collect();
    let split = data.len() * 4 / 5;
    let mut sizes = vec![layout.input_dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(layout.state_dim());
    let mut r = rng(seed);
    let mut model = MlpModel::new(sizes, cfg.activation, cfg.init, &mut r)?;
    let (train_nmse, test_nmse) = fit_mlp(
        &mut model,
        (&inputs[..split], &targets[..split]),
        (&inputs[split..], &targets[split..]),
        cfg,
        &mut r,
    )?;
    Ok(TrainOutcome {
        epochs_run: train_nmse.len(),
        baseline: TrainedBaseline {
            id: variant.id().to_string(),
            layout,
            bias: variant.bias(),
            model,
        },
        train_nmse,
        test_nmse,
    })
}

/// Iterated one-step predictions; `states[0]` is the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonPrediction {
    pub thetas: Vec<Vec<f64>>,
    pub keypoints: Vec<Vec<Keypoint>>,
    /// Set when a prediction became non-finite; later steps are dropped.
    pub truncated: bool,
}

pub fn predict_horizon(
    baseline: &TrainedBaseline,
    theta0: &[f64],
    z0: &[Keypoint],
    u: &ActionSequence,
) -> Result<HorizonPrediction> {
    let layout = baseline.layout;
    if theta0.len() != layout.dof || u.dof() != layout.dof || z0.len() != layout.keypoints {
        return Err(Error::DimensionMismatch {
            what: "baseline state size",
            expected: layout.state_dim(),
            actual: theta0.len() + z0.len() * layout.channels(),
        });
    }
    let mut state = layout.state(theta0, z0);
    let (t0, k0) = layout.split(&state);
    let mut out = HorizonPrediction {
        thetas: vec![t0],
        keypoints: vec![k0],
        truncated: false,
    };
    for t in 0..u.horizon() {
        let next = baseline.model.predict(&layout.input(&state, &u.step(t)));
        if next.iter().any(|v| !v.is_finite()) {
            out.truncated = true;
            break;
        }
        let (theta, z) = layout.split(&next);
        out.thetas.push(theta);
        out.keypoints.push(z);
        state = next;
    }
    Ok(out)
}

/// Planning through a trained baseline from its own initial observation.
#[derive(Debug, Clone)]
pub struct BaselinePredictor<'a> {
    pub baseline: &'a TrainedBaseline,
    pub z0: Vec<Keypoint>,
}

impl Predictor for BaselinePredictor<'_> {
    fn dof(&self) -> usize {
        self.baseline.layout.dof
    }

    fn keypoint_count(&self) -> usize {
        self.baseline.layout.keypoints
    }

    fn rollout(&self, theta0: &[f64], u: &ActionSequence) -> Result<Trajectory> {
        let pred = predict_horizon(self.baseline, theta0, &self.z0, u)?;
        if pred.truncated {
            return Err(Error::NonFinite("baseline rollout".into()));
        }
        Ok(Trajectory {
            states: pred
                .thetas
                .into_iter()
                .zip(pred.keypoints)
                .map(|(theta, keypoints)| TrajectoryState { theta, keypoints })
                .collect(),
        })
    }

    fn backprop(
        &self,
        _theta0: &[f64],
        u: &ActionSequence,
        traj: &Trajectory,
        dz: &[Vec<Vector3<f64>>],
    ) -> Result<DMatrix<f64>> {
        let layout = self.baseline.layout;
        let (sd, c) = (layout.state_dim(), layout.channels());
        let direct = |t: usize| {
            let mut g = DVector::zeros(sd);
            for (k, v) in dz[t].iter().enumerate() {
                for ch in 0..c {
                    g[layout.dof + k * c + ch] = v[ch];
                }
            }
            g
        };
        let horizon = u.horizon();
        let mut grad = DMatrix::zeros(horizon, layout.dof);
        // Adjoint of s_{t+1}.
        let mut lambda = direct(horizon - 1);
        for t in (0..horizon).rev() {
            let s = &traj.states[t];
            let x = layout.input(&layout.state(&s.theta, &s.keypoints), &u.step(t));
            let jac = self.baseline.model.input_jacobian(&x);
            let back = jac.transpose() * &lambda;
            grad.row_mut(t).copy_from(&back.rows(sd, layout.dof).transpose());
            if t > 0 {
                lambda = back.rows(0, sd).into_owned() + direct(t - 1);
            }
        }
        Ok(grad)
    }
}

/// Plans a placing scenario through `baseline` and executes the plan on the
/// true offsets. The baseline sees start and goal through its own detector.
pub fn run_baseline_task(scenario: &Scenario, baseline: &TrainedBaseline) -> Result<TaskReport> {
    let s = scenario;
    let true_z0 = project_chain(&s.camera, &s.chain, &s.theta0, &s.truth)?;
    let goal_keypoints = match &s.goal_theta {
        Some(theta) => baseline.observe_truth(&s.goal.keypoints, theta),
        None => s.goal.keypoints.clone(),
    };
    let mut weights = s.goal.weights;
    if !baseline.layout.depth {
        weights[2] = 0.0;
    }
    let planner = BaselinePredictor {
        baseline,
        z0: baseline.observe_truth(&true_z0, &s.theta0),
    };
    let goal = GoalSpec::new(goal_keypoints).with_weights(weights);
    let sol = optimize_with(&planner, &s.theta0, &goal, None, &s.config)?;
    let executed = rollout(&s.chain, &s.camera, &s.truth, &s.theta0, &sol.actions)?;
    let final_keypoints = executed.last().keypoints.clone();
    Ok(TaskReport {
        name: s.name.clone(),
        seed: s.seed,
        rmse_px: pixel_rmse(&final_keypoints, &s.goal.keypoints),
        cost_history: sol.cost_history,
        epochs_run: sol.epochs_run,
        actions: sol.actions,
        final_keypoints,
    })
}

/// Mean and standard deviation of one predictor's error at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonErrorRow {
    pub step: usize,
    pub model_id: String,
    pub mean_err_px: f64,
    pub std_err_px: f64,
}

pub const KINEMATIC_MODEL_ID: &str = "kinematic";

/// Mean pixel distance between matching keypoints.
pub fn mean_pixel_error(a: &[Keypoint], b: &[Keypoint]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p.pixel_distance(q)).sum::<f64>() / a.len().max(1) as f64
}

/// Mean and sample standard deviation; NaN for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// A start configuration and an action sequence to predict along.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSequence {
    pub theta0: Vec<f64>,
    pub actions: ActionSequence,
}

/// Per-step prediction error against the true keypoints for the kinematic
/// model (with offsets `phi_model`) and every baseline.
pub fn compare_long_horizon(
    chain: &KinematicChain,
    cam: &CameraModel,
    truth: &VirtualJointSet,
    phi_model: &VirtualJointSet,
    baselines: &[&TrainedBaseline],
    sequences: &[TestSequence],
) -> Result<Vec<HorizonErrorRow>> {
    let horizon = sequences.iter().map(|s| s.actions.horizon()).max().unwrap_or(0);
    let ids: Vec<String> = std::iter::once(KINEMATIC_MODEL_ID.to_string())
        .chain(baselines.iter().map(|b| b.id.clone()))
        .collect();
    // errors[model][step - 1] collects one value per sequence.
    let mut errors = vec![vec![Vec::new(); horizon]; ids.len()];
    for seq in sequences {
        let thetas = seq.actions.integrate(&seq.theta0);
        let true_z = thetas
            .iter()
            .map(|th| project_chain(cam, chain, th, truth))
            .collect::<Result<Vec<_>>>()?;
        for t in 1..thetas.len() {
            let kin = project_chain(cam, chain, &thetas[t], phi_model)?;
            errors[0][t - 1].push(mean_pixel_error(&kin, &true_z[t]));
        }
        for (m, b) in baselines.iter().enumerate() {
            let z0 = b.observe_truth(&true_z[0], &seq.theta0);
            let pred = predict_horizon(b, &seq.theta0, &z0, &seq.actions)?;
            for t in 1..pred.keypoints.len() {
                errors[m + 1][t - 1].push(mean_pixel_error(&pred.keypoints[t], &true_z[t]));
            }
        }
    }
    let mut rows = Vec::new();
    for step in 1..=horizon {
        for (m, id) in ids.iter().enumerate() {
            let (mean_err_px, std_err_px) = mean_std(&errors[m][step - 1]);
            rows.push(HorizonErrorRow {
                step,
                model_id: id.clone(),
                mean_err_px,
                std_err_px,
            });
        }
    }
    Ok(rows)
}

/// Uniform random action sequences from the given starts whose true
/// keypoints stay in the image.
pub fn random_action_sequences(
    chain: &KinematicChain,
    cam: &CameraModel,
    truth: &VirtualJointSet,
    starts: &[Vec<f64>],
    horizon: usize,
    max_delta: f64,
    rng: &mut impl Rng,
) -> Result<Vec<TestSequence>> {
    const ATTEMPTS: usize = 100;
    starts
        .iter()
        .map(|theta0| {
            for _ in 0..ATTEMPTS {
                let rows: Vec<Vec<f64>> = (0..horizon)
                    .map(|_| {
                        (0..chain.dof())
                            .map(|_| rng.random_range(-max_delta..=max_delta))
                            .collect()
                    })
                    .collect();
                let actions = ActionSequence::from_rows(&rows)?;
                let visible = actions.integrate(theta0).iter().all(|th| {
                    project_chain(cam, chain, th, truth)
                        .map(|z| z.iter().all(|p| cam.contains(p, MIN_CAMERA_Z, f64::INFINITY)))
                        .unwrap_or(false)
                });
                if visible {
                    return Ok(TestSequence {
                        theta0: theta0.clone(),
                        actions,
                    });
                }
            }
            Err(Error::RejectionBound {
                wanted: 1,
                attempts: ATTEMPTS,
                ranges: format!("+-{max_delta} rad per step"),
            })
        })
        .collect()
}
