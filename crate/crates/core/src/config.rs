//! Chain, camera, scene and scenario files.
//!
//! All files are TOML documents carrying `schema_version = 1`. Rotations are
//! written as axis-angle vectors in radians, translations in meters. The
//! default scene is compiled into the library so tests and the CLI share one
//! source of truth.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::baseline::SineMotion;
use crate::camera::{CameraModel, ImagePoint, Intrinsics};
use crate::geom::{KinematicChain, Link, RigidTransform, VirtualJointSet, VirtualLink};
use crate::keypoint::JointSampler;
use crate::mpc::{GoalSource, Scenario};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_CHAIN_TOML: &str = include_str!("../scenes/chain.toml");
pub const DEFAULT_CAMERA_TOML: &str = include_str!("../scenes/camera.toml");
pub const DEFAULT_SCENE_TOML: &str = include_str!("../scenes/scene.toml");

/// Nominal posture of the default scene, object in view in front of the camera.
pub const HOME_POSTURE: [f64; 7] = [0.0, 0.7, 0.0, -1.4, 0.0, 0.9, 0.0];

fn check_version(source: &str, version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::parse(
            source,
            format!("unsupported schema_version {version} (expected {SCHEMA_VERSION})"),
        ));
    }
    Ok(())
}

fn parse_toml<T: for<'de> Deserialize<'de>>(source: &str, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::parse(source, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkEntry {
    pub name: String,
    pub joint_type: JointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<[f64; 3]>,
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VirtualLinkEntry {
    pub translation: [f64; 3],
    #[serde(default = "default_true")]
    pub learnable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainFile {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    /// Name of the end-effector link; the last link when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ee_link: Option<String>,
    pub links: Vec<LinkEntry>,
    #[serde(default)]
    pub virtual_links: Vec<VirtualLinkEntry>,
}

impl ChainFile {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let file: ChainFile = parse_toml(source, text)?;
        check_version(source, file.schema_version)?;
        Ok(file)
    }

    pub fn to_chain(&self) -> Result<KinematicChain> {
        let mut links = Vec::with_capacity(self.links.len());
        for entry in &self.links {
            let origin = RigidTransform::from_axis_angle(entry.rotation.into(), entry.translation.into());
            let link = match entry.joint_type {
                JointKind::Revolute => {
                    let axis = entry
                        .axis
                        .ok_or_else(|| Error::InvalidChain(format!("revolute link '{}' has no axis", entry.name)))?;
                    Link::revolute(&entry.name, axis.into(), origin)?
                }
                JointKind::Fixed => Link::fixed(&entry.name, origin),
            };
            links.push(link);
        }
        let ee_index = match &self.ee_link {
            Some(name) => links
                .iter()
                .position(|l| &l.name == name)
                .ok_or_else(|| Error::InvalidChain(format!("end-effector link '{name}' not found")))?,
            None => links.len().saturating_sub(1),
        };
        let virtual_links = self
            .virtual_links
            .iter()
            .map(|v| VirtualLink {
                translation: v.translation.into(),
                learnable: v.learnable,
            })
            .collect();
        Ok(KinematicChain::new(links, ee_index)?.with_virtual_links(virtual_links))
    }
}

pub fn parse_chain(source: &str, text: &str) -> Result<KinematicChain> {
    ChainFile::parse(source, text)?.to_chain()
}

pub fn load_chain(path: &Path) -> Result<KinematicChain> {
    parse_chain(&path.display().to_string(), &read_file(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtrinsicEntry {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraFile {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub extrinsic: ExtrinsicEntry,
}

impl CameraFile {
    pub fn to_camera(&self) -> Result<CameraModel> {
        CameraModel::new(
            RigidTransform::from_axis_angle(self.extrinsic.rotation.into(), self.extrinsic.translation.into()),
            Intrinsics {
                fx: self.fx,
                fy: self.fy,
                cx: self.cx,
                cy: self.cy,
            },
            self.width,
            self.height,
        )
    }
}

pub fn parse_camera(source: &str, text: &str) -> Result<CameraModel> {
    let file: CameraFile = parse_toml(source, text)?;
    check_version(source, file.schema_version)?;
    file.to_camera()
}

pub fn load_camera(path: &Path) -> Result<CameraModel> {
    parse_camera(&path.display().to_string(), &read_file(path)?)
}

pub fn default_chain() -> KinematicChain {
    parse_chain("default chain", DEFAULT_CHAIN_TOML).expect("built-in chain file is valid")
}

pub fn default_camera() -> CameraModel {
    parse_camera("default camera", DEFAULT_CAMERA_TOML).expect("built-in camera file is valid")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerEntry {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub min_depth: f64,
    pub max_depth: f64,
    pub max_oversampling: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectPreset {
    pub name: String,
    pub phi: Vec<[f64; 3]>,
}

impl ObjectPreset {
    pub fn phi(&self) -> VirtualJointSet {
        VirtualJointSet::new(self.phi.iter().map(|&p| p.into()).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskPreset {
    pub name: String,
    pub theta0: Vec<f64>,
    pub goal_theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SineEntry {
    pub dt: f64,
    pub amplitude: Vec<f64>,
    pub frequency: Vec<f64>,
    pub phase: Vec<f64>,
}

/// Object, grasp, task and sampling presets shared by all experiments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub schema_version: u32,
    pub home: Vec<f64>,
    /// Per-joint bound on each placing action (radians).
    pub max_joint_step: f64,
    pub sampler: SamplerEntry,
    pub objects: Vec<ObjectPreset>,
    pub grasps: Vec<[f64; 3]>,
    pub tasks: Vec<TaskPreset>,
    pub sine: SineEntry,
}

impl SceneFile {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let file: SceneFile = parse_toml(source, text)?;
        check_version(source, file.schema_version)?;
        Ok(file)
    }

    pub fn sampler(&self) -> Result<JointSampler> {
        let s = &self.sampler;
        let ranges = s.lower.iter().copied().zip(s.upper.iter().copied()).collect();
        if s.lower.len() != s.upper.len() {
            return Err(Error::InvalidConfig("sampler lower/upper lengths differ".into()));
        }
        JointSampler::new(ranges, s.min_depth, s.max_depth, s.max_oversampling)
    }

    pub fn grasp_shifts(&self) -> Vec<Vector3<f64>> {
        self.grasps.iter().map(|&g| g.into()).collect()
    }

    pub fn sine_motion(&self) -> SineMotion {
        SineMotion {
            center: self.home.clone(),
            amplitude: self.sine.amplitude.clone(),
            frequency: self.sine.frequency.clone(),
            phase: self.sine.phase.clone(),
            dt: self.sine.dt,
        }
    }
}

pub fn default_scene() -> SceneFile {
    SceneFile::parse("default scene", DEFAULT_SCENE_TOML).expect("built-in scene file is valid")
}

pub fn load_scene(path: &Path) -> Result<SceneFile> {
    SceneFile::parse(&path.display().to_string(), &read_file(path)?)
}

/// Where the controller's virtual joint offsets come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PhiSourceEntry {
    GroundTruth,
    RegressionResult { path: PathBuf },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GoalEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<[f64; 3]>>,
}

fn default_horizon() -> usize {
    10
}
fn default_epochs() -> usize {
    crate::mpc::DEFAULT_EPOCHS
}
fn default_eta() -> f64 {
    crate::mpc::DEFAULT_LEARNING_RATE
}
fn default_weights() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}
fn default_ref() -> String {
    "default".into()
}

/// A single placing task. `chain` and `camera` are paths relative to the
/// scenario file, or `"default"` for the built-in scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_ref")]
    pub chain: String,
    #[serde(default = "default_ref")]
    pub camera: String,
    /// True offsets of the grasped object, used to generate goals and to score.
    pub ground_truth: Vec<[f64; 3]>,
    pub phi: PhiSourceEntry,
    pub theta0: Vec<f64>,
    pub goal: GoalEntry,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_weights")]
    pub weights: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_step: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn resolve(base: &Path, reference: &str) -> Option<PathBuf> {
    (reference != "default").then(|| base.join(reference))
}

impl ScenarioFile {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let file: ScenarioFile = parse_toml(source, text)?;
        check_version(source, file.schema_version)?;
        Ok(file)
    }

    /// Loads referenced files relative to `base_dir` and validates the scenario.
    pub fn resolve(&self, base_dir: &Path) -> Result<Scenario> {
        let chain = match resolve(base_dir, &self.chain) {
            Some(p) => load_chain(&p)?,
            None => default_chain(),
        };
        let camera = match resolve(base_dir, &self.camera) {
            Some(p) => load_camera(&p)?,
            None => default_camera(),
        };
        let truth = VirtualJointSet::new(self.ground_truth.iter().map(|&p| p.into()).collect());
        let phi = match &self.phi {
            PhiSourceEntry::GroundTruth => truth.clone(),
            PhiSourceEntry::RegressionResult { path } => {
                crate::regression::RegressionReport::load(&base_dir.join(path))?.phi()?
            }
        };
        if phi.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                what: "virtual joint count of the phi source",
                expected: truth.len(),
                actual: phi.len(),
            });
        }
        let goal = match (&self.goal.theta, &self.goal.keypoints) {
            (Some(theta), None) => GoalSource::Theta(theta.clone()),
            (None, Some(kps)) => GoalSource::Keypoints(kps.iter().map(|k| ImagePoint::new(k[0], k[1], k[2])).collect()),
            _ => {
                return Err(Error::InvalidConfig(
                    "goal needs exactly one of `theta` or `keypoints`".into(),
                ))
            }
        };
        Scenario::new(
            self.name.clone(),
            chain,
            camera,
            truth,
            phi,
            self.theta0.clone(),
            goal,
            self.horizon,
            self.epochs,
            self.eta,
            self.weights,
            self.seed,
        )?
        .with_max_step(self.max_step)
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let file = ScenarioFile::parse(&path.display().to_string(), &read_file(path)?)?;
    file.resolve(path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scene_is_consistent() {
        let chain = default_chain();
        assert_eq!(chain.dof(), 7);
        assert_eq!(chain.ee_index(), 7);
        let scene = default_scene();
        assert_eq!(scene.home, HOME_POSTURE.to_vec());
        assert_eq!(scene.objects.len(), 3);
        assert_eq!(scene.grasps.len(), 4);
        assert_eq!(scene.tasks.len(), 3);
        for obj in &scene.objects {
            assert_eq!(obj.phi.len(), 3);
        }
        for g in scene.grasp_shifts().iter().skip(1) {
            assert!((0.01..=0.05).contains(&g.norm()), "grasp shift {g:?} outside 1-5 cm");
        }
        scene.sampler().unwrap();
    }

    #[test]
    fn camera_points_at_workspace() {
        let cam = default_camera();
        let chain = default_chain();
        let ip = crate::camera::project_ee(&cam, &chain, &HOME_POSTURE).unwrap();
        assert!(cam.contains(&ip, 0.5, 5.0), "{ip:?}");
    }

    #[test]
    fn chain_file_errors() {
        let missing_axis = r#"
schema_version = 1
[[links]]
name = "a"
joint_type = "revolute"
translation = [0.0, 0.0, 0.1]
"#;
        assert!(matches!(parse_chain("t", missing_axis), Err(Error::InvalidChain(_))));
        let bad_version = DEFAULT_CHAIN_TOML.replace("schema_version = 1", "schema_version = 9");
        assert!(matches!(parse_chain("t", &bad_version), Err(Error::Parse { .. })));
        let bad_ee = DEFAULT_CHAIN_TOML.replace("ee_link = \"gripper\"", "ee_link = \"nope\"");
        assert!(parse_chain("t", &bad_ee).is_err());
    }

    #[test]
    fn virtual_links_section_parses() {
        let text = format!(
            "{DEFAULT_CHAIN_TOML}\n[[virtual_links]]\ntranslation = [0.1, 0.0, 0.0]\n\n[[virtual_links]]\ntranslation = [0.0, 0.2, 0.0]\nlearnable = false\n"
        );
        let chain = parse_chain("t", &text).unwrap();
        assert_eq!(chain.virtual_links().len(), 2);
        assert!(!chain.virtual_links()[1].learnable);
        let phi = VirtualJointSet::from(chain.virtual_links());
        assert_eq!(phi.to_flat(), vec![0.1, 0.0, 0.0, 0.0, 0.2, 0.0]);
    }

    #[test]
    fn scenario_requires_one_goal_kind() {
        let text = r#"
schema_version = 1
ground_truth = [[0.0, 0.0, 0.1]]
theta0 = [0.0, 0.7, 0.0, -1.4, 0.0, 0.9, 0.0]
[phi]
source = "ground_truth"
[goal]
"#;
        let file = ScenarioFile::parse("t", text).unwrap();
        assert!(matches!(file.resolve(Path::new(".")), Err(Error::InvalidConfig(_))));
    }
}
