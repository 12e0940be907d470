//! Rigid transforms and serial kinematic chains.
//!
//! Link `i` is placed relative to link `i - 1` by its fixed origin transform
//! followed by the joint motion:
//!
//! ```text
//! pose_i = pose_{i-1} * origin_i * R(axis_i, theta_i)
//! ```
//!
//! Virtual links hang off the end-effector frame and carry a translation
//! only.

use nalgebra::{Matrix3, Matrix4, Unit, UnitQuaternion, Vector3};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        let mut rotation = rotation;
        rotation.renormalize();
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation given as an axis-angle vector (direction = axis, norm = angle in radians).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(axis_angle), translation)
    }

    pub fn rotation_about(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Self::new(UnitQuaternion::from_axis_angle(axis, angle), Vector3::zeros())
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        self.rotation.scaled_axis()
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        RigidTransform {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rotation = self.rotation.inverse();
        RigidTransform {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointType {
    Revolute { axis: Unit<Vector3<f64>> },
    Fixed,
}

/// One rigid body of the chain together with the joint connecting it to its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    pub joint: JointType,
    /// Pose of the joint frame in the parent link frame.
    pub origin: RigidTransform,
}

impl Link {
    pub fn revolute(name: impl Into<String>, axis: Vector3<f64>, origin: RigidTransform) -> Result<Self> {
        let name = name.into();
        let norm = axis.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidChain(format!(
                "revolute link '{name}' has a degenerate axis {axis:?}"
            )));
        }
        Ok(Self {
            name,
            joint: JointType::Revolute {
                axis: Unit::new_normalize(axis),
            },
            origin,
        })
    }

    pub fn fixed(name: impl Into<String>, origin: RigidTransform) -> Self {
        Self {
            name: name.into(),
            joint: JointType::Fixed,
            origin,
        }
    }

    pub fn is_revolute(&self) -> bool {
        matches!(self.joint, JointType::Revolute { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualLink {
    /// Offset from the end-effector origin, in the end-effector frame (meters).
    pub translation: Vector3<f64>,
    pub learnable: bool,
}

/// Translation parameters of the virtual joints, one 3-vector per keypoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VirtualJointSet(Vec<Vector3<f64>>);

impl VirtualJointSet {
    pub fn new(offsets: Vec<Vector3<f64>>) -> Self {
        Self(offsets)
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![Vector3::zeros(); k])
    }

    /// Builds the set from a flat `[x0, y0, z0, x1, ...]` slice.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::DimensionMismatch {
                what: "flat virtual joint vector length (multiple of 3)",
                expected: flat.len() / 3 * 3,
                actual: flat.len(),
            });
        }
        Ok(Self(
            flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
        ))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn offsets(&self) -> &[Vector3<f64>] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vector3<f64>> {
        self.0.iter()
    }

    /// Same set with every offset shifted by `delta` (a re-grasp).
    pub fn shifted(&self, delta: &Vector3<f64>) -> Self {
        Self(self.0.iter().map(|v| v + delta).collect())
    }

    /// Sum of squared coordinate differences.
    pub fn squared_distance(&self, other: &VirtualJointSet) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).norm_squared()).sum()
    }
}

impl From<&[VirtualLink]> for VirtualJointSet {
    fn from(links: &[VirtualLink]) -> Self {
        Self(links.iter().map(|l| l.translation).collect())
    }
}

/// Base-frame joint origin and axis of one revolute joint at a given configuration.
#[derive(Debug, Clone, Copy)]
pub struct JointFrame {
    pub link_index: usize,
    pub dof_index: usize,
    pub origin: Vector3<f64>,
    pub axis: Vector3<f64>,
}

/// Result of forward kinematics: every link pose plus the revolute joint frames.
#[derive(Debug, Clone)]
pub struct ChainPose {
    pub link_poses: Vec<RigidTransform>,
    pub joints: Vec<JointFrame>,
    ee_index: usize,
}

impl ChainPose {
    pub fn ee(&self) -> &RigidTransform {
        &self.link_poses[self.ee_index]
    }

    /// Joints that move the end-effector (and anything rigidly attached to it).
    pub fn ee_joints(&self) -> impl Iterator<Item = &JointFrame> {
        let ee = self.ee_index;
        self.joints.iter().filter(move |j| j.link_index <= ee)
    }
}

/// Serial chain from base to end-effector. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    links: Vec<Link>,
    ee_index: usize,
    virtual_links: Vec<VirtualLink>,
    dof: usize,
}

impl KinematicChain {
    pub fn new(links: Vec<Link>, ee_index: usize) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::InvalidChain("chain has no links".into()));
        }
        if ee_index >= links.len() {
            return Err(Error::InvalidChain(format!(
                "end-effector index {ee_index} out of range for {} links",
                links.len()
            )));
        }
        let dof = links.iter().filter(|l| l.is_revolute()).count();
        Ok(Self {
            links,
            ee_index,
            virtual_links: Vec::new(),
            dof,
        })
    }

    pub fn with_virtual_links(mut self, virtual_links: Vec<VirtualLink>) -> Self {
        self.virtual_links = virtual_links;
        self
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn ee_index(&self) -> usize {
        self.ee_index
    }

    pub fn virtual_links(&self) -> &[VirtualLink] {
        &self.virtual_links
    }

    /// Number of revolute joints, i.e. the joint-angle dimension.
    pub fn dof(&self) -> usize {
        self.dof
    }

    fn check_angles(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dof {
            return Err(Error::DimensionMismatch {
                what: "joint angle count",
                expected: self.dof,
                actual: theta.len(),
            });
        }
        if theta.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("joint angles".into()));
        }
        Ok(())
    }

    pub fn pose(&self, theta: &[f64]) -> Result<ChainPose> {
        self.check_angles(theta)?;
        let mut link_poses = Vec::with_capacity(self.links.len());
        let mut joints = Vec::with_capacity(self.dof);
        let mut parent = RigidTransform::identity();
        let mut dof_index = 0;
        for (link_index, link) in self.links.iter().enumerate() {
            let joint_frame = parent.compose(&link.origin);
            let pose = match &link.joint {
                JointType::Revolute { axis } => {
                    joints.push(JointFrame {
                        link_index,
                        dof_index,
                        origin: *joint_frame.translation(),
                        axis: joint_frame.transform_vector(axis.as_ref()),
                    });
                    let angle = theta[dof_index];
                    dof_index += 1;
                    joint_frame.compose(&RigidTransform::rotation_about(axis, angle))
                }
                JointType::Fixed => joint_frame,
            };
            link_poses.push(pose);
            parent = pose;
        }
        Ok(ChainPose {
            link_poses,
            joints,
            ee_index: self.ee_index,
        })
    }

    /// Base-frame pose of every link.
    pub fn forward_kinematics(&self, theta: &[f64]) -> Result<Vec<RigidTransform>> {
        Ok(self.pose(theta)?.link_poses)
    }

    pub fn ee_pose(&self, theta: &[f64]) -> Result<RigidTransform> {
        Ok(*self.pose(theta)?.ee())
    }

    /// Base-frame positions of the virtual joints: `ee_pose * phi_k`.
    pub fn virtual_link_positions(&self, theta: &[f64], phi: &VirtualJointSet) -> Result<Vec<Vector3<f64>>> {
        let ee = self.ee_pose(theta)?;
        Ok(phi.iter().map(|p| ee.transform_point(p)).collect())
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Planar 2-link arm, 0.5 m links along x, both joints about z.
    pub fn planar_two_link() -> KinematicChain {
        let z = Vector3::z();
        KinematicChain::new(
            vec![
                Link::revolute("shoulder", z, RigidTransform::identity()).unwrap(),
                Link::revolute(
                    "elbow",
                    z,
                    RigidTransform::from_translation(Vector3::new(0.5, 0.0, 0.0)),
                )
                .unwrap(),
                Link::fixed("tool", RigidTransform::from_translation(Vector3::new(0.5, 0.0, 0.0))),
            ],
            2,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::planar_two_link;
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn rot_z(angle: f64) -> RigidTransform {
        RigidTransform::from_axis_angle(Vector3::z() * angle, Vector3::zeros())
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-2.0..2.0f64))
            .prop_map(|(r, t)| RigidTransform::from_axis_angle(Vector3::from(r), Vector3::from(t)))
    }

    #[test]
    fn compose_with_identity() {
        let t = RigidTransform::from_axis_angle(Vector3::new(0.1, -0.4, 0.9), Vector3::new(1.0, 2.0, 3.0));
        let c = RigidTransform::identity().compose(&t);
        assert_relative_eq!(c.to_homogeneous(), t.to_homogeneous(), epsilon = 1e-15);
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        // Pose with rotation rot_z(pi/2) and translation (1,0,0), then trans(1,0,0).
        let a = RigidTransform::from_axis_angle(Vector3::z() * FRAC_PI_2, Vector3::x());
        let b = RigidTransform::from_translation(Vector3::x());
        let c = a.compose(&b);
        let expected = a.to_homogeneous() * b.to_homogeneous();
        assert_relative_eq!(c.to_homogeneous(), expected, epsilon = 1e-12);
        assert_relative_eq!(*c.translation(), Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(c.rotation_matrix(), rot_z(FRAC_PI_2).rotation_matrix(), epsilon = 1e-12);
    }

    #[test]
    fn fk_planar_straight() {
        let chain = planar_two_link();
        let ee = chain.ee_pose(&[0.0, 0.0]).unwrap();
        assert_relative_eq!(*ee.translation(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn fk_planar_quarter_turn() {
        let chain = planar_two_link();
        let ee = chain.ee_pose(&[FRAC_PI_2, 0.0]).unwrap();
        assert_relative_eq!(*ee.translation(), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn fk_planar_matches_trigonometry() {
        // Independent planar oracle: x = l1 cos(a) + l2 cos(a + b), y likewise with sin.
        let (a, b) = (FRAC_PI_4, FRAC_PI_4);
        let oracle = Vector3::new(
            0.5 * a.cos() + 0.5 * (a + b).cos(),
            0.5 * a.sin() + 0.5 * (a + b).sin(),
            0.0,
        );
        assert_relative_eq!(oracle, Vector3::new(0.353553, 0.853553, 0.0), epsilon = 1e-6);
        let ee = planar_two_link().ee_pose(&[a, b]).unwrap();
        assert_relative_eq!(*ee.translation(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn fk_rejects_wrong_dimension() {
        let err = planar_two_link().forward_kinematics(&[0.0]).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 2,
                actual: 1,
                ..
            }
        ));
    }

    #[test]
    fn fk_rejects_nan() {
        assert!(matches!(
            planar_two_link().forward_kinematics(&[0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn degenerate_axis_rejected() {
        assert!(Link::revolute("bad", Vector3::zeros(), RigidTransform::identity()).is_err());
    }

    #[test]
    fn revolute_axis_is_normalized() {
        let link = Link::revolute("j", Vector3::new(0.0, 3.0, 4.0), RigidTransform::identity()).unwrap();
        let JointType::Revolute { axis } = link.joint else {
            unreachable!()
        };
        assert_relative_eq!(axis.norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn virtual_zero_offset_is_ee() {
        let chain = planar_two_link();
        let theta = [0.3, -1.1];
        let pts = chain
            .virtual_link_positions(&theta, &VirtualJointSet::zeros(1))
            .unwrap();
        assert_relative_eq!(pts[0], *chain.ee_pose(&theta).unwrap().translation(), epsilon = 1e-15);
    }

    #[test]
    fn virtual_offset_straight_arm() {
        let phi = VirtualJointSet::new(vec![Vector3::new(0.1, 0.0, 0.0)]);
        let pts = planar_two_link().virtual_link_positions(&[0.0, 0.0], &phi).unwrap();
        assert_relative_eq!(pts[0], Vector3::new(1.1, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn virtual_three_joints_and_empty() {
        let chain = planar_two_link();
        assert_eq!(
            chain
                .virtual_link_positions(&[0.0, 0.0], &VirtualJointSet::zeros(3))
                .unwrap()
                .len(),
            3
        );
        assert!(chain
            .virtual_link_positions(&[0.0, 0.0], &VirtualJointSet::zeros(0))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn fk_is_bit_deterministic() {
        let chain = crate::config::default_chain();
        let theta = [0.1, 0.7, -0.2, -1.3, 0.4, 0.8, -0.5];
        let a = chain.forward_kinematics(&theta).unwrap();
        let b = chain.forward_kinematics(&theta).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quaternion_stays_unit_after_many_compositions() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut acc = RigidTransform::identity();
        for _ in 0..100_000 {
            let r = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            acc = acc.compose(&RigidTransform::from_axis_angle(r, Vector3::zeros()));
        }
        assert!((acc.rotation().quaternion().norm() - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn compose_inverse_is_identity(t in arb_transform()) {
            let c = t.compose(&t.inverse());
            let eye = nalgebra::Matrix4::<f64>::identity();
            prop_assert!((c.to_homogeneous() - eye).abs().max() < 1e-9);
            prop_assert!((c.rotation().quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn link_lengths_are_preserved(theta in prop::collection::vec(-3.1..3.1f64, 7)) {
            let chain = crate::config::default_chain();
            let poses = chain.forward_kinematics(&theta).unwrap();
            for i in 1..poses.len() {
                let d = (poses[i].translation() - poses[i - 1].translation()).norm();
                prop_assert!((d - chain.links()[i].origin.translation().norm()).abs() < 1e-9);
            }
        }

        #[test]
        fn virtual_links_are_rigid(
            theta in prop::collection::vec(-3.1..3.1f64, 7),
            offset in prop::array::uniform3(-0.3..0.3f64),
        ) {
            let chain = crate::config::default_chain();
            let phi = VirtualJointSet::new(vec![Vector3::from(offset)]);
            let p = chain.virtual_link_positions(&theta, &phi).unwrap()[0];
            let ee = *chain.ee_pose(&theta).unwrap().translation();
            prop_assert!(((p - ee).norm() - phi.offsets()[0].norm()).abs() < 1e-9);
        }
    }
}
