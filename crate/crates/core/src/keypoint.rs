//! Oracle keypoint observer, kinematic heatmaps and observation datasets.
//!
//! The oracle stands in for a trained keypoint detector: it projects the
//! ground-truth virtual joints and adds seeded Gaussian noise.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{project_chain, project_ee, CameraModel, ImagePoint, Keypoint};
use crate::geom::{KinematicChain, VirtualJointSet};
use crate::grad::{linearize_projection, GradientRecord};
use crate::seed::{derive_seed, rng};
use crate::{Error, Result};

/// Systematic pose-dependent pixel offset, used to mimic keypoints that sit
/// off the grasped object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointBias {
    pub magnitude_px: f64,
    /// Angular rate (rad per rad of summed joint angle) of the offset direction.
    pub rate: f64,
}

impl KeypointBias {
    pub fn offset(&self, theta: &[f64], keypoint: usize, count: usize) -> (f64, f64) {
        let phase = TAU * keypoint as f64 / count.max(1) as f64;
        let angle = self.rate * theta.iter().sum::<f64>() + phase;
        (self.magnitude_px * angle.cos(), self.magnitude_px * angle.sin())
    }
}

#[derive(Debug, Clone)]
pub struct OracleDetector {
    truth: VirtualJointSet,
    pixel_noise_sigma: f64,
    depth_noise_sigma: f64,
    bias: Option<KeypointBias>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl OracleDetector {
    pub fn new(truth: VirtualJointSet, pixel_noise_sigma: f64, depth_noise_sigma: f64, seed: u64) -> Result<Self> {
        if !(pixel_noise_sigma >= 0.0 && depth_noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise sigmas must be non-negative (pixel {pixel_noise_sigma}, depth {depth_noise_sigma})"
            )));
        }
        Ok(Self {
            truth,
            pixel_noise_sigma,
            depth_noise_sigma,
            bias: None,
            seed,
            rng: rng(seed),
        })
    }

    pub fn noiseless(truth: VirtualJointSet) -> Self {
        Self::new(truth, 0.0, 0.0, 0).expect("zero noise is valid")
    }

    pub fn with_bias(mut self, bias: KeypointBias) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn truth(&self) -> &VirtualJointSet {
        &self.truth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pixel_noise_sigma(&self) -> f64 {
        self.pixel_noise_sigma
    }

    pub fn depth_noise_sigma(&self) -> f64 {
        self.depth_noise_sigma
    }

    /// Independent detector for a parallel run; its seed is derived from this one.
    pub fn fork(&self, stream: &str) -> Self {
        let seed = derive_seed(self.seed, stream);
        Self {
            rng: rng(seed),
            seed,
            ..self.clone()
        }
    }

    pub(crate) fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn noise(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, sigma)
            .expect("sigma checked at construction")
            .sample(&mut self.rng)
    }

    /// Keypoint observation at configuration `theta`.
    pub fn observe(&mut self, cam: &CameraModel, chain: &KinematicChain, theta: &[f64]) -> Result<Vec<Keypoint>> {
        let exact = project_chain(cam, chain, theta, &self.truth)?;
        let count = exact.len();
        let bias = self.bias;
        Ok(exact
            .into_iter()
            .enumerate()
            .map(|(k, p)| {
                let (bx, by) = bias.map_or((0.0, 0.0), |b| b.offset(theta, k, count));
                let (sp, sd) = (self.pixel_noise_sigma, self.depth_noise_sigma);
                ImagePoint {
                    x: p.x + bx + self.noise(sp),
                    y: p.y + by + self.noise(sp),
                    depth: p.depth + self.noise(sd),
                }
            })
            .collect())
    }
}

/// Uniform sampling of joint configurations with an in-view rejection rule.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSampler {
    ranges: Vec<(f64, f64)>,
    min_depth: f64,
    max_depth: f64,
    max_oversampling: usize,
}

impl JointSampler {
    pub fn new(ranges: Vec<(f64, f64)>, min_depth: f64, max_depth: f64, max_oversampling: usize) -> Result<Self> {
        if ranges
            .iter()
            .any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi))
        {
            return Err(Error::InvalidConfig(format!("invalid joint ranges {ranges:?}")));
        }
        if !(min_depth > 0.0 && min_depth < max_depth) || max_oversampling == 0 {
            return Err(Error::InvalidConfig(
                "invalid in-view depth window or oversampling bound".into(),
            ));
        }
        Ok(Self {
            ranges,
            min_depth,
            max_depth,
            max_oversampling,
        })
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.ranges
            .iter()
            .map(|&(lo, hi)| if lo == hi { lo } else { rng.random_range(lo..hi) })
            .collect()
    }

    /// Every true keypoint inside the image and the depth window.
    pub fn in_view(&self, cam: &CameraModel, chain: &KinematicChain, theta: &[f64], truth: &VirtualJointSet) -> bool {
        match project_chain(cam, chain, theta, truth) {
            Ok(points) => points.iter().all(|p| cam.contains(p, self.min_depth, self.max_depth)),
            Err(_) => false,
        }
    }

    fn describe(&self) -> String {
        let mut s = String::from("[");
        for (i, (lo, hi)) in self.ranges.iter().enumerate() {
            let _ = write!(s, "{}{lo}..{hi}", if i > 0 { ", " } else { "" });
        }
        s.push(']');
        s
    }

    /// Draws `n` in-view configurations, or fails after `n * max_oversampling` attempts.
    pub fn sample_in_view(
        &self,
        rng: &mut impl Rng,
        cam: &CameraModel,
        chain: &KinematicChain,
        truth: &VirtualJointSet,
        n: usize,
    ) -> Result<Vec<Vec<f64>>> {
        if self.ranges.len() != chain.dof() {
            return Err(Error::DimensionMismatch {
                what: "sampler joint ranges",
                expected: chain.dof(),
                actual: self.ranges.len(),
            });
        }
        let budget = n * self.max_oversampling;
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            if attempts == budget {
                return Err(Error::RejectionBound {
                    wanted: n,
                    attempts,
                    ranges: self.describe(),
                });
            }
            attempts += 1;
            let theta = self.draw(rng);
            if self.in_view(cam, chain, &theta, truth) {
                out.push(theta);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub theta: Vec<f64>,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetMetadata {
    pub seed: u64,
    pub pixel_noise_sigma: f64,
    pub depth_noise_sigma: f64,
    pub chain_id: String,
    pub camera_id: String,
}

/// Regression dataset `{(theta_t, z_t)}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationDataset {
    pub records: Vec<ObservationRecord>,
    pub metadata: DatasetMetadata,
}

/// Prints a float with 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl ObservationDataset {
    pub fn new(records: Vec<ObservationRecord>, metadata: DatasetMetadata) -> Result<Self> {
        let dataset = Self { records, metadata };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn keypoint_count(&self) -> usize {
        self.records.first().map_or(0, |r| r.keypoints.len())
    }

    pub fn dof(&self) -> usize {
        self.records.first().map_or(0, |r| r.theta.len())
    }

    pub fn validate(&self) -> Result<()> {
        let (k, dof) = (self.keypoint_count(), self.dof());
        for (i, r) in self.records.iter().enumerate() {
            if r.keypoints.len() != k {
                return Err(Error::InvalidConfig(format!(
                    "record {i} has {} keypoints, expected {k}",
                    r.keypoints.len()
                )));
            }
            if r.theta.len() != dof {
                return Err(Error::InvalidConfig(format!(
                    "record {i} has {} joint angles, expected {dof}",
                    r.theta.len()
                )));
            }
            if r.keypoints.iter().any(|p| !(p.depth > 0.0)) {
                return Err(Error::InvalidConfig(format!("record {i} has a non-positive depth")));
            }
        }
        Ok(())
    }

    /// CSV text: `# key: value` metadata lines (`extra_metadata` first), a header
    /// row, one row per record.
    pub fn to_csv(&self, extra_metadata: &[(String, String)]) -> Result<String> {
        let (k, dof) = (self.keypoint_count(), self.dof());
        let mut out = String::new();
        let m = &self.metadata;
        let own = [
            ("seed", m.seed.to_string()),
            ("pixel_noise_sigma", format_float(m.pixel_noise_sigma)),
            ("depth_noise_sigma", format_float(m.depth_noise_sigma)),
            ("chain_id", m.chain_id.clone()),
            ("camera_id", m.camera_id.clone()),
        ];
        for (key, value) in extra_metadata.iter().map(|(a, b)| (a.as_str(), b.clone())).chain(own) {
            let _ = writeln!(out, "# {key}: {value}");
        }
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec!["t".to_string()];
        header.extend((0..dof).map(|j| format!("theta_{j}")));
        for i in 0..k {
            header.extend([format!("kp{i}_x"), format!("kp{i}_y"), format!("kp{i}_d")]);
        }
        writer
            .write_record(&header)
            .map_err(|e| Error::parse("dataset csv", e))?;
        for (t, r) in self.records.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(r.theta.iter().map(|&v| format_float(v)));
            for p in &r.keypoints {
                row.extend([format_float(p.x), format_float(p.y), format_float(p.depth)]);
            }
            writer.write_record(&row).map_err(|e| Error::parse("dataset csv", e))?;
        }
        let body = writer.into_inner().map_err(|e| Error::parse("dataset csv", e))?;
        out.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn from_csv(source: &str, text: &str) -> Result<Self> {
        let mut metadata = DatasetMetadata::default();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let Some((key, value)) = line.trim_start_matches('#').split_once(':') else {
                continue;
            };
            let value = value.trim();
            let float = |v: &str| {
                v.parse::<f64>()
                    .map_err(|e| Error::parse(source, format!("{key}: {e}")))
            };
            match key.trim() {
                "seed" => metadata.seed = value.parse().map_err(|e| Error::parse(source, format!("seed: {e}")))?,
                "pixel_noise_sigma" => metadata.pixel_noise_sigma = float(value)?,
                "depth_noise_sigma" => metadata.depth_noise_sigma = float(value)?,
                "chain_id" => metadata.chain_id = value.to_string(),
                "camera_id" => metadata.camera_id = value.to_string(),
                _ => {}
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::parse(source, e))?.clone();
        let dof = header.iter().filter(|h| h.starts_with("theta_")).count();
        let kp_columns = header.len().saturating_sub(1 + dof);
        if header.get(0) != Some("t") || kp_columns % 3 != 0 {
            return Err(Error::parse(source, "unexpected header layout"));
        }
        let k = kp_columns / 3;
        let mut records = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::parse(source, e))?;
            let values: Vec<f64> = row
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(source, format!("row {line}: {e}")))?;
            if values.len() != dof + 3 * k {
                return Err(Error::parse(source, format!("row {line}: wrong column count")));
            }
            records.push(ObservationRecord {
                theta: values[..dof].to_vec(),
                keypoints: values[dof..]
                    .chunks_exact(3)
                    .map(|c| ImagePoint::new(c[0], c[1], c[2]))
                    .collect(),
            });
        }
        Self::new(records, metadata)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_csv(&path.display().to_string(), &text)
    }
}

fn metadata_for(det: &OracleDetector) -> DatasetMetadata {
    DatasetMetadata {
        seed: det.seed(),
        pixel_noise_sigma: det.pixel_noise_sigma(),
        depth_noise_sigma: det.depth_noise_sigma(),
        chain_id: String::new(),
        camera_id: String::new(),
    }
}

/// `n_configs` random in-view configurations, each observed once.
pub fn gen_dataset(
    det: &mut OracleDetector,
    cam: &CameraModel,
    chain: &KinematicChain,
    n_configs: usize,
    sampler: &JointSampler,
) -> Result<ObservationDataset> {
    let truth = det.truth().clone();
    let configs = sampler.sample_in_view(det.rng_mut(), cam, chain, &truth, n_configs)?;
    let records = configs
        .into_iter()
        .map(|theta| {
            let keypoints = det.observe(cam, chain, &theta)?;
            Ok(ObservationRecord { theta, keypoints })
        })
        .collect::<Result<Vec<_>>>()?;
    ObservationDataset::new(records, metadata_for(det))
}

/// Motion-sequence collection: from each random configuration only the
/// wrist joints move while frames are recorded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectionProtocol {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    /// Seconds between frames.
    pub frame_interval: f64,
    /// Peak wrist excursion in radians.
    pub wrist_amplitude: f64,
    /// Number of trailing joints that move during a sequence.
    pub moving_joints: usize,
}

impl CollectionProtocol {
    /// 60 random configurations, 5 s at 5 Hz each.
    pub fn simulation() -> Self {
        Self {
            sequences: 60,
            frames_per_sequence: 25,
            frame_interval: 0.2,
            wrist_amplitude: 0.4,
            moving_joints: 2,
        }
    }

    /// 50 sequences of 3 s with 10 frames each.
    pub fn hardware() -> Self {
        Self {
            sequences: 50,
            frames_per_sequence: 10,
            frame_interval: 0.3,
            wrist_amplitude: 0.4,
            moving_joints: 2,
        }
    }

    pub fn total_frames(&self) -> usize {
        self.sequences * self.frames_per_sequence
    }
}

pub fn gen_sequence_dataset(
    det: &mut OracleDetector,
    cam: &CameraModel,
    chain: &KinematicChain,
    protocol: &CollectionProtocol,
    sampler: &JointSampler,
) -> Result<ObservationDataset> {
    let truth = det.truth().clone();
    let dof = chain.dof();
    let moving = protocol.moving_joints.min(dof);
    let duration = protocol.frame_interval * protocol.frames_per_sequence as f64;
    let mut records = Vec::with_capacity(protocol.total_frames());
    let mut produced = 0;
    let mut attempts = 0;
    let budget = protocol.sequences * sampler.max_oversampling;
    while produced < protocol.sequences {
        if attempts == budget {
            return Err(Error::RejectionBound {
                wanted: protocol.sequences,
                attempts,
                ranges: sampler.describe(),
            });
        }
        attempts += 1;
        let start = sampler.draw(det.rng_mut());
        let phases: Vec<f64> = (0..moving).map(|_| det.rng_mut().random_range(0.0..TAU)).collect();
        let frames: Vec<Vec<f64>> = (0..protocol.frames_per_sequence)
            .map(|f| {
                let t = f as f64 * protocol.frame_interval;
                let mut theta = start.clone();
                for (i, phase) in phases.iter().enumerate() {
                    theta[dof - moving + i] += protocol.wrist_amplitude * (TAU * t / duration + phase).sin();
                }
                theta
            })
            .collect();
        if !frames.iter().all(|th| sampler.in_view(cam, chain, th, &truth)) {
            continue;
        }
        for theta in frames {
            let keypoints = det.observe(cam, chain, &theta)?;
            records.push(ObservationRecord { theta, keypoints });
        }
        produced += 1;
    }
    ObservationDataset::new(records, metadata_for(det))
}

/// Dense 2D feature map, row-major (`data[v * width + u]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Pixel `(u, v)` of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }
}

/// Gaussian blob around a projected end-effector.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: FeatureGrid,
    pub peak: ImagePoint,
    /// Rasterized center pixel; the blob's maximum (1.0) sits here.
    pub center_pixel: (i64, i64),
    /// False when the center falls outside the image (only a tail is drawn).
    pub center_in_image: bool,
}

/// Kinematic feature map: `exp(-((u - cx)^2 + (v - cy)^2) / (2 sigma^2))`
/// around the rasterized center pixel, so the peak value is exactly 1.
pub fn kinematic_heatmap(center: &ImagePoint, sigma: f64, size: (usize, usize)) -> Result<Heatmap> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "heatmap sigma must be positive, got {sigma}"
        )));
    }
    if !(center.x.is_finite() && center.y.is_finite()) {
        return Err(Error::NonFinite("heatmap center".into()));
    }
    let (width, height) = size;
    let (cu, cv) = (center.x.round() as i64, center.y.round() as i64);
    let mut grid = FeatureGrid::zeros(width, height);
    let denom = 2.0 * sigma * sigma;
    for v in 0..height {
        let dv = v as f64 - cv as f64;
        for u in 0..width {
            let du = u as f64 - cu as f64;
            grid.data[v * width + u] = (-(du * du + dv * dv) / denom).exp();
        }
    }
    let center_in_image = (0..width as i64).contains(&cu) && (0..height as i64).contains(&cv);
    Ok(Heatmap {
        grid,
        peak: *center,
        center_pixel: (cu, cv),
        center_in_image,
    })
}

/// Joint feature map: element-wise sum of a visual map and the kinematic heatmap.
pub fn fuse_feature_maps(visual: &FeatureGrid, kin: &Heatmap) -> Result<FeatureGrid> {
    let k = &kin.grid;
    if (visual.width, visual.height) != (k.width, k.height) {
        return Err(Error::GridSizeMismatch(visual.width, visual.height, k.width, k.height));
    }
    Ok(FeatureGrid {
        width: k.width,
        height: k.height,
        data: visual.data.iter().zip(&k.data).map(|(a, b)| a + b).collect(),
    })
}

/// Kinematic consistency loss `sum_k sum_c w_c (z_kc - s_ee,c)^2`, `c` over
/// `(x, y, depth)`.
pub fn kinematic_consistency_loss_weighted(keypoints: &[Keypoint], ee: &ImagePoint, weights: [f64; 3]) -> f64 {
    keypoints
        .iter()
        .map(|z| {
            weights[0] * (z.x - ee.x).powi(2)
                + weights[1] * (z.y - ee.y).powi(2)
                + weights[2] * (z.depth - ee.depth).powi(2)
        })
        .sum()
}

/// Unweighted kinematic consistency loss.
pub fn kinematic_consistency_loss(keypoints: &[Keypoint], ee: &ImagePoint) -> f64 {
    kinematic_consistency_loss_weighted(keypoints, ee, [1.0; 3])
}

/// Weighting of the kinematic consistency term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicLossConfig {
    /// Scale of the term in a detector's total loss.
    pub lambda_kin: f64,
    pub weights: [f64; 3],
}

impl Default for KinematicLossConfig {
    fn default() -> Self {
        Self {
            lambda_kin: 1.0,
            weights: [1.0; 3],
        }
    }
}

/// `lambda_kin * L_kin` at configuration `theta`, with gradients for the
/// `"keypoints"` block (`3K`) and the `"theta"` block (through the projected
/// end-effector).
pub fn kinematic_consistency_grad(
    cam: &CameraModel,
    chain: &KinematicChain,
    theta: &[f64],
    keypoints: &[Keypoint],
    cfg: &KinematicLossConfig,
) -> Result<GradientRecord> {
    let ee = project_ee(cam, chain, theta)?;
    let lin = linearize_projection(cam, chain, theta, &VirtualJointSet::zeros(1))?;
    let w = cfg.weights;
    let scale = cfg.lambda_kin;
    let mut d_keypoints = nalgebra::DVector::zeros(3 * keypoints.len());
    let mut d_ee = nalgebra::Vector3::zeros();
    for (k, z) in keypoints.iter().enumerate() {
        let r = [z.x - ee.x, z.y - ee.y, z.depth - ee.depth];
        for c in 0..3 {
            let g = 2.0 * scale * w[c] * r[c];
            d_keypoints[3 * k + c] = g;
            d_ee[c] -= g;
        }
    }
    let d_theta = lin.d_theta.transpose() * d_ee;
    Ok(
        GradientRecord::new(scale * kinematic_consistency_loss_weighted(keypoints, &ee, w))
            .with("keypoints", d_keypoints)
            .with("theta", d_theta),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{default_camera, default_chain, default_scene, HOME_POSTURE};
    use approx::assert_relative_eq;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn box_truth() -> VirtualJointSet {
        default_scene().objects[0].phi()
    }

    #[test]
    fn noiseless_observation_is_exact_projection() {
        let (cam, chain) = (default_camera(), default_chain());
        let mut det = OracleDetector::noiseless(box_truth());
        let obs = det.observe(&cam, &chain, &HOME_POSTURE).unwrap();
        assert_eq!(obs, project_chain(&cam, &chain, &HOME_POSTURE, &box_truth()).unwrap());
    }

    #[test]
    fn same_seed_same_observations() {
        let (cam, chain) = (default_camera(), default_chain());
        let mut a = OracleDetector::new(box_truth(), 1.0, 0.01, 42).unwrap();
        let mut b = OracleDetector::new(box_truth(), 1.0, 0.01, 42).unwrap();
        assert_eq!(
            a.observe(&cam, &chain, &HOME_POSTURE).unwrap(),
            b.observe(&cam, &chain, &HOME_POSTURE).unwrap()
        );
    }

    #[test]
    fn pixel_noise_has_requested_spread() {
        let (cam, chain) = (default_camera(), default_chain());
        let exact = project_chain(&cam, &chain, &HOME_POSTURE, &box_truth()).unwrap();
        let mut det = OracleDetector::new(box_truth(), 1.0, 0.0, 3).unwrap();
        let errs: Vec<f64> = (0..1000)
            .map(|_| det.observe(&cam, &chain, &HOME_POSTURE).unwrap()[0].x - exact[0].x)
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errs.len() - 1) as f64).sqrt();
        assert!((std - 1.0).abs() < 0.1, "std {std}");
    }

    #[test]
    fn negative_noise_rejected() {
        assert!(OracleDetector::new(box_truth(), -1.0, 0.0, 0).is_err());
    }

    #[test]
    fn dataset_sizes() {
        let (cam, chain) = (default_camera(), default_chain());
        let sampler = default_scene().sampler().unwrap();
        let mut det = OracleDetector::new(box_truth(), 0.0, 0.0, 1).unwrap();
        assert_eq!(gen_dataset(&mut det, &cam, &chain, 15, &sampler).unwrap().len(), 15);
        assert!(gen_dataset(&mut det, &cam, &chain, 0, &sampler).unwrap().is_empty());
    }

    #[test]
    fn default_ranges_pass_in_view_filter() {
        let (cam, chain) = (default_camera(), default_chain());
        let scene = default_scene();
        let sampler = scene.sampler().unwrap();
        let mut r = rng(11);
        for obj in &scene.objects {
            for g in scene.grasp_shifts() {
                let truth = obj.phi().shifted(&g);
                let n = 200;
                let accepted = (0..n)
                    .filter(|_| sampler.in_view(&cam, &chain, &sampler.draw(&mut r), &truth))
                    .count();
                assert_eq!(accepted, n, "{} grasp {g:?}", obj.name);
            }
        }
    }

    #[test]
    fn rejection_bound_names_ranges() {
        let (cam, chain) = (default_camera(), default_chain());
        // The arm never reaches 4.9 m from the camera.
        let ranges = vec![
            (3.0, 3.1),
            (-1.6, -1.5),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
        ];
        let sampler = JointSampler::new(ranges, 4.9, 5.0, 10).unwrap();
        let mut det = OracleDetector::noiseless(box_truth());
        match gen_dataset(&mut det, &cam, &chain, 5, &sampler) {
            Err(Error::RejectionBound { attempts, ranges, .. }) => {
                assert_eq!(attempts, 50);
                assert!(ranges.contains("3..3.1"), "{ranges}");
            }
            other => panic!("expected rejection error, got {other:?}"),
        }
    }

    #[test]
    fn protocol_shapes() {
        let (cam, chain) = (default_camera(), default_chain());
        let sampler = default_scene().sampler().unwrap();
        let mut det = OracleDetector::noiseless(box_truth());
        let sim = CollectionProtocol::simulation();
        assert_eq!(sim.total_frames(), 60 * 25);
        let hw = CollectionProtocol::hardware();
        let data = gen_sequence_dataset(&mut det, &cam, &chain, &hw, &sampler).unwrap();
        assert_eq!(data.len(), 500);
        // Within a sequence only the last two joints move.
        for seq in data.records.chunks(10) {
            for r in seq {
                assert_eq!(r.theta[..5], seq[0].theta[..5]);
            }
        }
    }

    #[test]
    fn heatmap_values() {
        let center = ImagePoint::new(100.0, 80.0, 1.0);
        let h = kinematic_heatmap(&center, 5.0, (200, 160)).unwrap();
        assert_eq!(h.grid.get(100, 80), 1.0);
        assert_relative_eq!(h.grid.get(105, 80), (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(h.grid.get(100, 75), 0.6065306597126334, epsilon = 1e-15);
        assert_eq!(h.grid.argmax(), (100, 80));
        assert!(h.center_in_image);
        assert!(h.grid.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn heatmap_shift_equivariance() {
        let a = kinematic_heatmap(&ImagePoint::new(50.0, 40.0, 1.0), 3.0, (120, 100)).unwrap();
        let b = kinematic_heatmap(&ImagePoint::new(53.0, 42.0, 1.0), 3.0, (120, 100)).unwrap();
        for v in 0..90 {
            for u in 0..110 {
                assert_eq!(a.grid.get(u, v), b.grid.get(u + 3, v + 2));
            }
        }
    }

    #[test]
    fn heatmap_outside_image_is_flagged() {
        let h = kinematic_heatmap(&ImagePoint::new(-10.0, 5.0, 1.0), 4.0, (64, 48)).unwrap();
        assert!(!h.center_in_image);
        assert!(h.grid.max() < 1.0);
        assert!(kinematic_heatmap(&ImagePoint::new(1.0, 1.0, 1.0), 0.0, (4, 4)).is_err());
    }

    #[test]
    fn heatmap_peak_at_projected_ee() {
        let (cam, chain) = (default_camera(), default_chain());
        let sampler = default_scene().sampler().unwrap();
        let mut r = rng(5);
        for _ in 0..20 {
            let theta = sampler.draw(&mut r);
            let ee = project_ee(&cam, &chain, &theta).unwrap();
            let h = kinematic_heatmap(&ee, 5.0, (640, 480)).unwrap();
            let (u, v) = h.grid.argmax();
            assert_eq!((u as i64, v as i64), (ee.x.round() as i64, ee.y.round() as i64));
        }
    }

    #[test]
    fn fusion() {
        let kin = kinematic_heatmap(&ImagePoint::new(10.0, 10.0, 1.0), 2.0, (32, 24)).unwrap();
        let zeros = FeatureGrid::zeros(32, 24);
        assert_eq!(fuse_feature_maps(&zeros, &kin).unwrap(), kin.grid);
        let other = FeatureGrid::zeros(16, 24);
        assert!(matches!(
            fuse_feature_maps(&other, &kin),
            Err(Error::GridSizeMismatch(..))
        ));
    }

    #[test]
    fn fusion_commutes_and_dominates() {
        let mut r = rng(9);
        let mk = |r: &mut ChaCha8Rng| FeatureGrid {
            width: 20,
            height: 10,
            data: (0..200).map(|_| r.random_range(0.0..1.0)).collect(),
        };
        let (a, b) = (mk(&mut r), mk(&mut r));
        let ha = Heatmap {
            grid: a.clone(),
            peak: ImagePoint::default(),
            center_pixel: (0, 0),
            center_in_image: true,
        };
        let hb = Heatmap {
            grid: b.clone(),
            ..ha.clone()
        };
        assert_eq!(fuse_feature_maps(&a, &hb).unwrap(), fuse_feature_maps(&b, &ha).unwrap());
        // Peaks at the same pixel: fused max dominates both inputs.
        let kin = kinematic_heatmap(&ImagePoint::new(7.0, 4.0, 1.0), 2.0, (20, 10)).unwrap();
        let mut visual = a.clone();
        visual.data[4 * 20 + 7] = 2.0;
        let fused = fuse_feature_maps(&visual, &kin).unwrap();
        assert!(fused.max() >= visual.max() && fused.max() >= kin.grid.max());
    }

    #[test]
    fn kinematic_loss_cases() {
        let ee = ImagePoint::new(100.0, 50.0, 1.5);
        assert_eq!(kinematic_consistency_loss(&[ee, ee, ee], &ee), 0.0);
        let off = ImagePoint::new(103.0, 54.0, 1.5);
        assert_eq!(kinematic_consistency_loss(&[off], &ee), 25.0);
        assert_eq!(kinematic_consistency_loss(&[], &ee), 0.0);
        let kps = [off, ee, ImagePoint::new(90.0, 50.0, 1.0)];
        let rev = [kps[2], kps[0], kps[1]];
        assert_eq!(
            kinematic_consistency_loss(&kps, &ee),
            kinematic_consistency_loss(&rev, &ee)
        );
    }

    #[test]
    fn csv_round_trip_file() {
        let (cam, chain) = (default_camera(), default_chain());
        let sampler = default_scene().sampler().unwrap();
        let mut det = OracleDetector::new(box_truth(), 1.0, 0.002, 77).unwrap();
        let mut data = gen_dataset(&mut det, &cam, &chain, 15, &sampler).unwrap();
        data.metadata.chain_id = "iiwa7-like".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        std::fs::write(&path, data.to_csv(&[]).unwrap()).unwrap();
        assert_eq!(ObservationDataset::load(&path).unwrap(), data);
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
        assert!(
            header.starts_with("t,theta_0,") && header.ends_with("kp2_x,kp2_y,kp2_d"),
            "{header}"
        );
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(values in prop::collection::vec(-1e6..1e6f64, 4 * 7)) {
            let records = values
                .chunks_exact(7)
                .map(|c| ObservationRecord {
                    theta: c[..4].to_vec(),
                    keypoints: vec![ImagePoint::new(c[4], c[5], c[6].abs() + 1e-3)],
                })
                .collect();
            let data = ObservationDataset::new(records, DatasetMetadata::default()).unwrap();
            let back = ObservationDataset::from_csv("p", &data.to_csv(&[]).unwrap()).unwrap();
            prop_assert_eq!(back, data);
        }

        #[test]
        fn kinematic_loss_non_negative(v in prop::collection::vec(-500.0..500.0f64, 9)) {
            let kps: Vec<_> = v.chunks_exact(3).map(|c| ImagePoint::new(c[0], c[1], c[2])).collect();
            let ee = ImagePoint::new(1.0, 2.0, 3.0);
            let l = kinematic_consistency_loss(&kps, &ee);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, kps.iter().all(|k| *k == ee));
        }
    }
}
