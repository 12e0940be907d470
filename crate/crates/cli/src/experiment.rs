//! Experiment configuration files and their resolution against the scene.
//!
//! Per-run seeds are derived from the master seed and a scenario id of the
//! form `<command>/<part>/...` (see [`bodyschema::seed::derive_seed`]), so
//! adding or removing scenarios never changes the seeds of the others.

use std::path::{Path, PathBuf};

use bodyschema::baseline::TrainConfig;
use bodyschema::config::{
    parse_camera, parse_chain, SceneFile, DEFAULT_CAMERA_TOML, DEFAULT_CHAIN_TOML, DEFAULT_SCENE_TOML,
};
use bodyschema::keypoint::{gen_dataset, CollectionProtocol, JointSampler, ObservationDataset, OracleDetector};
use bodyschema::regression::{regress, Optimizer, RegressionConfig, RegressionResult, ResidualScaling};
use bodyschema::seed::derive_seed;
use bodyschema::{CameraModel, KinematicChain, VirtualJointSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, Context};
use crate::output::Metadata;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// 60 random configurations, 25 frames each at 5 Hz.
    Sim,
    /// 50 sequences of 10 frames.
    Hardware,
}

impl Protocol {
    pub fn collection(self) -> CollectionProtocol {
        match self {
            Self::Sim => CollectionProtocol::simulation(),
            Self::Hardware => CollectionProtocol::hardware(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sim => "sim",
            Self::Hardware => "hardware",
        }
    }
}

/// Offsets the placing planner uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiSource {
    /// Regressed from noisy observations of the grasped object.
    Regressed,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub pixel_sigma: f64,
    /// Meters.
    pub depth_sigma: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            depth_sigma: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub protocol: Protocol,
    /// Random configurations per regression dataset.
    pub observations: usize,
    /// Transitions of sine motion for the dynamics baselines.
    pub sine_samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::Sim,
            observations: 15,
            sine_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionSection {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub optimizer: Optimizer,
}

impl Default for RegressionSection {
    fn default() -> Self {
        let d = RegressionConfig::default();
        Self {
            learning_rate: d.learning_rate,
            max_steps: d.max_steps,
            optimizer: d.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub horizon: usize,
    pub epochs: usize,
    pub eta: f64,
    pub phi: PhiSource,
    /// Per-joint action bound; the scene's `max_joint_step` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_step: Option<f64>,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            horizon: bodyschema::mpc::DEFAULT_HORIZON,
            epochs: bodyschema::mpc::DEFAULT_EPOCHS,
            eta: bodyschema::mpc::DEFAULT_LEARNING_RATE,
            phi: PhiSource::Regressed,
            max_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub plateau_tol: f64,
    pub plateau_window: usize,
    /// Pixel noise of the training observations, on top of any variant bias.
    pub pixel_sigma: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            hidden: d.hidden,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            batch_size: d.batch_size,
            plateau_tol: d.plateau_tol,
            plateau_window: d.plateau_window,
            pixel_sigma: 0.0,
        }
    }
}

impl BaselineSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden.clone(),
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            plateau_tol: self.plateau_tol,
            plateau_window: self.plateau_window,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonSection {
    pub random_sequences: usize,
    /// Radians per joint and step.
    pub max_delta: f64,
}

impl Default for HorizonSection {
    fn default() -> Self {
        Self {
            random_sequences: 20,
            max_delta: 0.05,
        }
    }
}

fn default_ref() -> String {
    "default".into()
}
fn default_object() -> String {
    "box".into()
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_out() -> PathBuf {
    PathBuf::from("results")
}

/// A complete experiment bundle. `chain`, `camera` and `scene` are paths
/// relative to the config file, or `"default"` for the built-in scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_ref")]
    pub chain: String,
    #[serde(default = "default_ref")]
    pub camera: String,
    #[serde(default = "default_ref")]
    pub scene: String,
    /// Name of the grasped object preset.
    #[serde(default = "default_object")]
    pub object: String,
    #[serde(default)]
    pub master_seed: u64,
    /// Seed indices; every index names one repetition of each scenario.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub regression: RegressionSection,
    #[serde(default)]
    pub mpc: MpcSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub horizon: HorizonSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            chain: default_ref(),
            camera: default_ref(),
            scene: default_ref(),
            object: default_object(),
            master_seed: 0,
            seeds: default_seeds(),
            out: default_out(),
            noise: NoiseSection::default(),
            data: DataSection::default(),
            regression: RegressionSection::default(),
            mpc: MpcSection::default(),
            baseline: BaselineSection::default(),
            horizon: HorizonSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Built-in configuration for one data-collection protocol.
    pub fn preset(protocol: Protocol) -> Self {
        let mut cfg = Self::default();
        cfg.data.protocol = protocol;
        cfg
    }

    pub fn parse(source: &str, text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::usage(format!("{source}: {e}")))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::usage(format!(
                "{source}: unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).context(format!("cannot read config {}", path.display()))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A config with every referenced file loaded and validated.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub chain: KinematicChain,
    pub camera: CameraModel,
    pub scene: SceneFile,
    /// Ground-truth offsets of the nominal grasp.
    pub truth: VirtualJointSet,
    /// SHA-256 over the config (without `out`) and the chain, camera and scene texts.
    pub config_hash: String,
}

/// `(source name, text)` of a referenced file.
fn read_ref(base: &Path, reference: &str, builtin: &str, what: &str) -> CliResult<(String, String)> {
    if reference == "default" {
        return Ok((format!("default {what}"), builtin.to_string()));
    }
    let path = base.join(reference);
    let text = std::fs::read_to_string(&path).context(format!("cannot read {what} file {}", path.display()))?;
    Ok((path.display().to_string(), text))
}

impl Experiment {
    /// Resolves references relative to `base_dir`.
    pub fn resolve(config: ExperimentConfig, base_dir: &Path) -> CliResult<Self> {
        let (chain_src, chain_text) = read_ref(base_dir, &config.chain, DEFAULT_CHAIN_TOML, "chain")?;
        let (camera_src, camera_text) = read_ref(base_dir, &config.camera, DEFAULT_CAMERA_TOML, "camera")?;
        let (scene_src, scene_text) = read_ref(base_dir, &config.scene, DEFAULT_SCENE_TOML, "scene")?;
        let chain = parse_chain(&chain_src, &chain_text)?;
        let camera = parse_camera(&camera_src, &camera_text)?;
        let scene = SceneFile::parse(&scene_src, &scene_text)?;

        let object = scene.objects.iter().find(|o| o.name == config.object).ok_or_else(|| {
            let names: Vec<&str> = scene.objects.iter().map(|o| o.name.as_str()).collect();
            CliError::usage(format!(
                "unknown object {:?}; the scene defines {}",
                config.object,
                names.join(", ")
            ))
        })?;
        let truth = object.phi();
        if config.seeds.is_empty() {
            return Err(CliError::usage("`seeds` must list at least one seed index"));
        }
        if scene.grasps.is_empty() || scene.tasks.is_empty() {
            return Err(CliError::usage("the scene needs at least one grasp and one task"));
        }
        for task in &scene.tasks {
            for (what, v) in [("theta0", &task.theta0), ("goal_theta", &task.goal_theta)] {
                if v.len() != chain.dof() {
                    return Err(CliError::usage(format!(
                        "task {}: {what} has {} entries, the chain has {} joints",
                        task.name,
                        v.len(),
                        chain.dof()
                    )));
                }
            }
        }
        scene.sampler()?;

        let mut hashed = config.clone();
        hashed.out = PathBuf::new();
        let mut h = Sha256::new();
        for part in [hashed.to_toml(), chain_text, camera_text, scene_text] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        Ok(Self {
            config,
            chain,
            camera,
            scene,
            truth,
            config_hash: hex::encode(h.finalize()),
        })
    }

    /// Loads `path` or the built-in preset, then applies flag overrides.
    pub fn load(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> CliResult<Self> {
        let (mut config, base) = match path {
            Some(p) => (
                ExperimentConfig::load(p)?,
                p.parent().unwrap_or(Path::new(".")).to_path_buf(),
            ),
            None => (ExperimentConfig::default(), PathBuf::from(".")),
        };
        if let Some(s) = seed {
            config.master_seed = s;
        }
        match out {
            Some(o) => config.out = o.to_path_buf(),
            None if path.is_some() && config.out.is_relative() => config.out = base.join(&config.out),
            None => {}
        }
        Self::resolve(config, &base)
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out
    }

    pub fn seed_for(&self, scenario_id: &str) -> u64 {
        derive_seed(self.config.master_seed, scenario_id)
    }

    pub fn sampler(&self) -> CliResult<JointSampler> {
        Ok(self.scene.sampler()?)
    }

    /// True offsets of grasp `g`.
    pub fn grasp_truth(&self, g: usize) -> VirtualJointSet {
        self.truth.shifted(&self.scene.grasp_shifts()[g])
    }

    /// Detector for `truth` with the given noise, seeded from `scenario_id`.
    pub fn detector(
        &self,
        truth: VirtualJointSet,
        pixel: f64,
        depth: f64,
        scenario_id: &str,
    ) -> CliResult<OracleDetector> {
        Ok(OracleDetector::new(truth, pixel, depth, self.seed_for(scenario_id))?)
    }

    pub fn regression_config(&self, pixel_sigma: f64) -> RegressionConfig {
        let r = &self.config.regression;
        let mut cfg = RegressionConfig {
            learning_rate: r.learning_rate,
            max_steps: r.max_steps,
            optimizer: r.optimizer,
            ..RegressionConfig::default()
        };
        if pixel_sigma > 0.0 {
            cfg.tol =
                RegressionConfig::noisy_tol(self.truth.len(), pixel_sigma, &self.camera, ResidualScaling::Normalized);
        }
        cfg
    }

    /// Observations of `truth` at `data.observations` random in-view configurations.
    pub fn observe(
        &self,
        truth: &VirtualJointSet,
        pixel: f64,
        depth: f64,
        scenario_id: &str,
    ) -> CliResult<ObservationDataset> {
        let mut det = self.detector(truth.clone(), pixel, depth, scenario_id)?;
        let mut data = gen_dataset(
            &mut det,
            &self.camera,
            &self.chain,
            self.config.data.observations,
            &self.sampler()?,
        )
        .context(scenario_id)?;
        data.metadata.chain_id = self.config.chain.clone();
        data.metadata.camera_id = self.config.camera.clone();
        Ok(data)
    }

    /// Observes `truth` and regresses the offsets from zero.
    pub fn regress_from_observations(
        &self,
        truth: &VirtualJointSet,
        pixel: f64,
        depth: f64,
        scenario_id: &str,
    ) -> CliResult<RegressionResult> {
        let data = self.observe(truth, pixel, depth, scenario_id)?;
        regress(&data, &self.camera, &self.chain, &self.regression_config(pixel)).context(scenario_id)
    }

    pub fn metadata(&self, command: &str) -> Metadata {
        Metadata::new(command)
            .with("master_seed", self.config.master_seed)
            .with("config_hash", &self.config_hash)
    }

    pub fn max_step(&self) -> f64 {
        self.config.mpc.max_step.unwrap_or(self.scene.max_joint_step)
    }
}
