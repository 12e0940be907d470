//! Gradient-based action optimization over a keypoint predictive model.
//!
//! The model is `theta_{t+1} = theta_t + u_t`, `z_t = h_phi(theta_t)`. Actions
//! are optimized by gradient descent on a cost between predicted and goal
//! keypoints; gradients are propagated back through the rollout.

use nalgebra::{DMatrix, Vector3};

use crate::camera::{project_chain, CameraModel, ImagePoint, Keypoint};
use crate::geom::{KinematicChain, VirtualJointSet};
use crate::grad::linearize_projection;
use crate::{Error, Result};

/// Steps planned per MPC call.
pub const DEFAULT_HORIZON: usize = 10;
pub const DEFAULT_EPOCHS: usize = 2000;
/// Initial step size; the line search adapts it.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-5;
pub const DEFAULT_STEP_GROWTH: f64 = 1.5;
const MAX_HALVINGS: usize = 50;

/// Joint-position deltas, `T x dof`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence(pub DMatrix<f64>);

impl ActionSequence {
    pub fn zeros(horizon: usize, dof: usize) -> Self {
        Self(DMatrix::zeros(horizon, dof))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let horizon = rows.len();
        if horizon == 0 {
            return Err(Error::InvalidConfig("action sequence needs at least one step".into()));
        }
        let dof = rows[0].len();
        if rows.iter().any(|r| r.len() != dof) {
            return Err(Error::InvalidConfig("action rows have different lengths".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action sequence".into()));
        }
        Ok(Self(DMatrix::from_fn(horizon, dof, |t, j| rows[t][j])))
    }

    pub fn horizon(&self) -> usize {
        self.0.nrows()
    }

    pub fn dof(&self) -> usize {
        self.0.ncols()
    }

    pub fn step(&self, t: usize) -> Vec<f64> {
        self.0.row(t).iter().copied().collect()
    }

    /// `theta_0 .. theta_T`.
    pub fn integrate(&self, theta0: &[f64]) -> Vec<Vec<f64>> {
        let mut states = vec![theta0.to_vec()];
        for t in 0..self.horizon() {
            let next = states[t].iter().zip(self.0.row(t).iter()).map(|(a, b)| a + b).collect();
            states.push(next);
        }
        states
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub theta: Vec<f64>,
    pub keypoints: Vec<Keypoint>,
}

/// `T + 1` predicted states, the first being the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<TrajectoryState>,
}

impl Trajectory {
    pub fn last(&self) -> &TrajectoryState {
        self.states.last().expect("trajectory has an initial state")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalSpec {
    pub keypoints: Vec<Keypoint>,
    /// Weights of the `(x, y, depth)` components.
    pub weights: [f64; 3],
}

impl GoalSpec {
    pub fn new(keypoints: Vec<Keypoint>) -> Self {
        Self {
            keypoints,
            weights: [1.0; 3],
        }
    }

    pub fn with_weights(mut self, weights: [f64; 3]) -> Self {
        self.weights = weights;
        self
    }

    /// Weighted squared distance of one keypoint set to the goal.
    pub fn distance(&self, z: &[Keypoint]) -> Result<f64> {
        self.check(z.len())?;
        Ok(z.iter()
            .zip(&self.keypoints)
            .map(|(a, g)| {
                let d = a.to_vector() - g.to_vector();
                self.weights[0] * d.x * d.x + self.weights[1] * d.y * d.y + self.weights[2] * d.z * d.z
            })
            .sum())
    }

    fn check(&self, k: usize) -> Result<()> {
        if k != self.keypoints.len() {
            return Err(Error::DimensionMismatch {
                what: "goal keypoints",
                expected: k,
                actual: self.keypoints.len(),
            });
        }
        Ok(())
    }

    fn gradient(&self, z: &[Keypoint], scale: f64) -> Vec<Vector3<f64>> {
        let w = Vector3::from(self.weights);
        z.iter()
            .zip(&self.keypoints)
            .map(|(a, g)| 2.0 * scale * (a.to_vector() - g.to_vector()).component_mul(&w))
            .collect()
    }
}

/// Weights of the cost terms beyond the final-state distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    /// Weight of the goal distance at intermediate steps `1..T-1`.
    pub running: f64,
    /// Weight of `sum ||u_t||^2`.
    pub action: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            running: 0.0,
            action: 0.0,
        }
    }
}

/// A differentiable keypoint predictor driven by joint deltas.
pub trait Predictor {
    fn dof(&self) -> usize;

    fn keypoint_count(&self) -> usize;

    /// Predicted trajectory for `u` from `theta0`.
    fn rollout(&self, theta0: &[f64], u: &ActionSequence) -> Result<Trajectory>;

    /// Gradient w.r.t. `u` of `sum_t <dz[t], z_{t+1}>`, where `dz[t]` holds one
    /// vector per keypoint. Returns a `T x dof` matrix.
    fn backprop(
        &self,
        theta0: &[f64],
        u: &ActionSequence,
        traj: &Trajectory,
        dz: &[Vec<Vector3<f64>>],
    ) -> Result<DMatrix<f64>>;
}

/// The extended kinematic chain as a predictor.
#[derive(Debug, Clone, Copy)]
pub struct KinematicPredictor<'a> {
    pub chain: &'a KinematicChain,
    pub cam: &'a CameraModel,
    pub phi: &'a VirtualJointSet,
}

impl Predictor for KinematicPredictor<'_> {
    fn dof(&self) -> usize {
        self.chain.dof()
    }

    fn keypoint_count(&self) -> usize {
        self.phi.len()
    }

    fn rollout(&self, theta0: &[f64], u: &ActionSequence) -> Result<Trajectory> {
        rollout(self.chain, self.cam, self.phi, theta0, u)
    }

    fn backprop(
        &self,
        _theta0: &[f64],
        u: &ActionSequence,
        traj: &Trajectory,
        dz: &[Vec<Vector3<f64>>],
    ) -> Result<DMatrix<f64>> {
        let horizon = u.horizon();
        let mut grad = DMatrix::zeros(horizon, self.dof());
        let mut suffix = nalgebra::DVector::zeros(self.dof());
        for t in (0..horizon).rev() {
            if dz[t].iter().any(|g| g.iter().any(|&v| v != 0.0)) {
                let lin = linearize_projection(self.cam, self.chain, &traj.states[t + 1].theta, self.phi)?;
                let flat =
                    nalgebra::DVector::from_iterator(3 * dz[t].len(), dz[t].iter().flat_map(|g| g.iter().copied()));
                suffix += lin.d_theta.transpose() * flat;
            }
            grad.row_mut(t).copy_from(&suffix.transpose());
        }
        Ok(grad)
    }
}

/// Open-loop integration of the kinematic predictive model.
pub fn rollout(
    chain: &KinematicChain,
    cam: &CameraModel,
    phi: &VirtualJointSet,
    theta0: &[f64],
    u: &ActionSequence,
) -> Result<Trajectory> {
    if u.dof() != chain.dof() {
        return Err(Error::DimensionMismatch {
            what: "action dimension",
            expected: chain.dof(),
            actual: u.dof(),
        });
    }
    let states = u
        .integrate(theta0)
        .into_iter()
        .enumerate()
        .map(|(step, theta)| {
            let keypoints = project_chain(cam, chain, &theta, phi).map_err(|e| match e {
                Error::KeypointBehindCamera { keypoint, .. } => Error::BehindCameraAtStep { step, keypoint },
                other => other,
            })?;
            Ok(TrajectoryState { theta, keypoints })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { states })
}

/// Cost of a trajectory: final-state goal distance plus optional running and
/// action terms.
pub fn cost(traj: &Trajectory, u: &ActionSequence, goal: &GoalSpec, weights: &CostWeights) -> Result<f64> {
    let horizon = traj.states.len() - 1;
    let mut c = goal.distance(&traj.last().keypoints)?;
    if weights.running != 0.0 {
        for s in &traj.states[1..horizon] {
            c += weights.running * goal.distance(&s.keypoints)?;
        }
    }
    if weights.action != 0.0 {
        c += weights.action * u.0.norm_squared();
    }
    Ok(c)
}

/// Cost and its gradient w.r.t. `u` (`T x dof`), plus the predicted trajectory.
pub fn cost_and_grad<P: Predictor + ?Sized>(
    model: &P,
    theta0: &[f64],
    u: &ActionSequence,
    goal: &GoalSpec,
    weights: &CostWeights,
) -> Result<(f64, DMatrix<f64>, Trajectory)> {
    goal.check(model.keypoint_count())?;
    let traj = model.rollout(theta0, u)?;
    let c = cost(&traj, u, goal, weights)?;
    let horizon = u.horizon();
    let dz: Vec<Vec<Vector3<f64>>> = (1..=horizon)
        .map(|t| {
            let scale = if t == horizon { 1.0 } else { weights.running };
            goal.gradient(&traj.states[t].keypoints, scale)
        })
        .collect();
    let mut grad = model.backprop(theta0, u, &traj, &dz)?;
    if weights.action != 0.0 {
        grad += 2.0 * weights.action * &u.0;
    }
    Ok((c, grad, traj))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub epochs: usize,
    /// Initial step size `eta`.
    pub learning_rate: f64,
    /// Step multiplier after an accepted step; 1 gives pure step-halving.
    pub step_growth: f64,
    pub step_rule: StepRule,
    pub cost_weights: CostWeights,
    /// Optional bound on `|u_t,j|`, enforced by clamping.
    pub max_step: Option<f64>,
    /// Re-solve from the reached state after each executed action.
    pub replan: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            step_growth: DEFAULT_STEP_GROWTH,
            step_rule: StepRule::default(),
            cost_weights: CostWeights::default(),
            max_step: None,
            replan: false,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eta must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.step_growth >= 1.0) {
            return Err(Error::InvalidConfig("step growth must be at least 1".into()));
        }
        if matches!(self.max_step, Some(b) if !(b > 0.0)) {
            return Err(Error::InvalidConfig("max_step must be positive".into()));
        }
        Ok(())
    }
}

/// How the step size evolves between accepted epochs. Trial steps that raise
/// the cost are halved under either rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    /// Multiply by `step_growth` after each accepted step.
    Growth,
    /// Barzilai-Borwein step `s.s / s.y` from the last two iterates.
    BarzilaiBorwein,
    /// The short variant `s.y / y.y`.
    #[default]
    BarzilaiBorweinShort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub actions: ActionSequence,
    /// Cost before the first epoch and after each accepted epoch.
    pub cost_history: Vec<f64>,
    /// Predicted trajectory of `actions`.
    pub trajectory: Trajectory,
    pub epochs_run: usize,
}

impl MpcSolution {
    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().expect("history holds the initial cost")
    }
}

fn clamp(u: &mut ActionSequence, bound: Option<f64>) {
    if let Some(b) = bound {
        u.0.apply(|v| *v = v.clamp(-b, b));
    }
}

/// Gradient descent on the action sequence with step-halving acceptance, so
/// the cost history never increases.
pub fn optimize_with<P: Predictor + ?Sized>(
    model: &P,
    theta0: &[f64],
    goal: &GoalSpec,
    init: Option<ActionSequence>,
    cfg: &MpcConfig,
) -> Result<MpcSolution> {
    cfg.validate()?;
    let mut u = init.unwrap_or_else(|| ActionSequence::zeros(cfg.horizon, model.dof()));
    clamp(&mut u, cfg.max_step);
    let (mut c, mut grad, mut traj) = cost_and_grad(model, theta0, &u, goal, &cfg.cost_weights)?;
    if !c.is_finite() {
        return Err(Error::NonFinite("initial control cost".into()));
    }
    let mut history = vec![c];
    let mut eta = cfg.learning_rate;
    let mut epochs_run = 0;
    for _ in 0..cfg.epochs {
        if grad.iter().all(|&g| g == 0.0) {
            break;
        }
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut candidate = ActionSequence(&u.0 - eta * &grad);
            clamp(&mut candidate, cfg.max_step);
            // Leaving the camera's view during a trial counts as an increase.
            if let Ok((c2, g2, t2)) = cost_and_grad(model, theta0, &candidate, goal, &cfg.cost_weights) {
                if c2.is_finite() && c2 <= c {
                    accepted = Some((candidate, c2, g2, t2));
                    break;
                }
            }
            eta *= 0.5;
        }
        let Some((candidate, c2, g2, t2)) = accepted else {
            break;
        };
        let s_k = &candidate.0 - &u.0;
        let y_k = &g2 - &grad;
        let sy = s_k.dot(&y_k);
        eta = match cfg.step_rule {
            StepRule::BarzilaiBorwein if sy > 0.0 => s_k.norm_squared() / sy,
            StepRule::BarzilaiBorweinShort if sy > 0.0 => sy / y_k.norm_squared(),
            _ => eta * cfg.step_growth,
        };
        u = candidate;
        c = c2;
        grad = g2;
        traj = t2;
        history.push(c);
        epochs_run += 1;
    }
    Ok(MpcSolution {
        actions: u,
        cost_history: history,
        trajectory: traj,
        epochs_run,
    })
}

/// Plans with the extended kinematic chain.
pub fn optimize_actions(
    chain: &KinematicChain,
    cam: &CameraModel,
    phi: &VirtualJointSet,
    theta0: &[f64],
    goal: &GoalSpec,
    cfg: &MpcConfig,
) -> Result<MpcSolution> {
    optimize_with(&KinematicPredictor { chain, cam, phi }, theta0, goal, None, cfg)
}

/// Executes one action at a time, re-solving over the shrinking remaining
/// horizon from the reached joint state.
pub fn optimize_with_replanning<P: Predictor + ?Sized>(
    model: &P,
    theta0: &[f64],
    goal: &GoalSpec,
    cfg: &MpcConfig,
) -> Result<ActionSequence> {
    let mut theta = theta0.to_vec();
    let mut executed = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        let sub = MpcConfig {
            horizon: cfg.horizon - t,
            replan: false,
            ..cfg.clone()
        };
        let sol = optimize_with(model, &theta, goal, None, &sub)?;
        let step = sol.actions.step(0);
        theta.iter_mut().zip(&step).for_each(|(a, b)| *a += b);
        executed.push(step);
    }
    ActionSequence::from_rows(&executed)
}

/// Where the goal keypoints of a scenario come from.
#[derive(Debug, Clone, PartialEq)]
pub enum GoalSource {
    /// Goal image rendered with the true offsets at this configuration.
    Theta(Vec<f64>),
    Keypoints(Vec<Keypoint>),
}

/// A fully resolved placing task.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub chain: KinematicChain,
    pub camera: CameraModel,
    /// True offsets; the plant that executes the plan.
    pub truth: VirtualJointSet,
    /// Offsets used by the planner.
    pub phi: VirtualJointSet,
    pub theta0: Vec<f64>,
    pub goal: GoalSpec,
    /// Configuration the goal image was rendered at, when known.
    pub goal_theta: Option<Vec<f64>>,
    pub config: MpcConfig,
    pub seed: u64,
}

impl Scenario {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: String,
        chain: KinematicChain,
        camera: CameraModel,
        truth: VirtualJointSet,
        phi: VirtualJointSet,
        theta0: Vec<f64>,
        goal: GoalSource,
        horizon: usize,
        epochs: usize,
        eta: f64,
        weights: [f64; 3],
        seed: u64,
    ) -> Result<Self> {
        if theta0.len() != chain.dof() {
            return Err(Error::DimensionMismatch {
                what: "theta0 length",
                expected: chain.dof(),
                actual: theta0.len(),
            });
        }
        if phi.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                what: "planner virtual joint count",
                expected: truth.len(),
                actual: phi.len(),
            });
        }
        let (keypoints, goal_theta) = match goal {
            GoalSource::Theta(theta) => (project_chain(&camera, &chain, &theta, &truth)?, Some(theta)),
            GoalSource::Keypoints(k) => (k, None),
        };
        let goal = GoalSpec::new(keypoints).with_weights(weights);
        goal.check(truth.len())?;
        let config = MpcConfig {
            horizon,
            epochs,
            learning_rate: eta,
            ..MpcConfig::default()
        };
        config.validate()?;
        Ok(Self {
            name,
            chain,
            camera,
            truth,
            phi,
            theta0,
            goal,
            goal_theta,
            config,
            seed,
        })
    }

    pub fn with_max_step(mut self, bound: Option<f64>) -> Result<Self> {
        self.config.max_step = bound;
        self.config.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub name: String,
    pub seed: u64,
    /// Root mean square pixel error of the true final keypoints.
    pub rmse_px: f64,
    pub cost_history: Vec<f64>,
    pub epochs_run: usize,
    pub actions: ActionSequence,
    pub final_keypoints: Vec<Keypoint>,
}

/// RMSE over keypoints and both pixel components.
pub fn pixel_rmse(a: &[ImagePoint], b: &[ImagePoint]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p.x - q.x).powi(2) + (p.y - q.y).powi(2))
        .sum();
    (sum / (2 * a.len().max(1)) as f64).sqrt()
}

/// Plans with the scenario's `phi`, executes open loop on the true offsets
/// and scores the final image against the goal.
pub fn run_task(scenario: &Scenario) -> Result<TaskReport> {
    let s = scenario;
    let planner = KinematicPredictor {
        chain: &s.chain,
        cam: &s.camera,
        phi: &s.phi,
    };
    let (actions, cost_history, epochs_run) = if s.config.replan {
        let u = optimize_with_replanning(&planner, &s.theta0, &s.goal, &s.config)?;
        let (c, _, _) = cost_and_grad(&planner, &s.theta0, &u, &s.goal, &s.config.cost_weights)?;
        (u, vec![c], s.config.epochs * s.config.horizon)
    } else {
        let sol = optimize_with(&planner, &s.theta0, &s.goal, None, &s.config)?;
        (sol.actions, sol.cost_history, sol.epochs_run)
    };
    let executed = rollout(&s.chain, &s.camera, &s.truth, &s.theta0, &actions)?;
    let final_keypoints = executed.last().keypoints.clone();
    Ok(TaskReport {
        name: s.name.clone(),
        seed: s.seed,
        rmse_px: pixel_rmse(&final_keypoints, &s.goal.keypoints),
        cost_history,
        epochs_run,
        actions,
        final_keypoints,
    })
}
