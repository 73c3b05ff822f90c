//! Skeletal motion representation.
//!
//! A frame is `K·6 + 3 + C` values: one 6D rotation per rotated joint, the
//! per-frame root displacement, and one contact channel per foot joint.
//! Joints that carry no rotation channels ("sites", e.g. toe and heel
//! points) are rigidly attached to their parent.

use std::sync::Arc;

use mrmotion_autodiff::Tensor;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of one rotation feature block.
pub const ROT_DIM: usize = 6;

/// Default contact threshold: 0.02 m/frame, i.e. 0.5 m/s at 25 fps.
pub const DEFAULT_EPS_CONTACT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    /// Parent index per joint, `-1` for the root.
    pub parents: Vec<i32>,
    /// Rest offset from the parent, meters. For the root: rest position.
    pub offsets: Vec<[f64; 3]>,
    /// Joints that carry rotation channels.
    pub rotated: Vec<bool>,
    /// Joints whose velocities define foot contact.
    pub foot_joints: Vec<usize>,
}

impl Skeleton {
    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<i32>,
        offsets: Vec<[f64; 3]>,
        rotated: Vec<bool>,
        foot_joints: Vec<usize>,
    ) -> Result<Self> {
        let s = Self { joint_names, parents, offsets, rotated, foot_joints };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.parents.len();
        if n == 0 {
            return Err(Error::validation("skeleton has no joints"));
        }
        if self.joint_names.len() != n || self.offsets.len() != n || self.rotated.len() != n {
            return Err(Error::validation("skeleton field lengths disagree"));
        }
        if self.parents[0] != -1 {
            return Err(Error::validation("joint 0 must be the root (parent -1)"));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::validation(format!(
                    "joint {j} has parent {p}; parents must precede children and only the root has -1"
                )));
            }
        }
        if !self.rotated[0] {
            return Err(Error::validation("the root joint must carry rotation channels"));
        }
        let mut seen = vec![false; n];
        for &f in &self.foot_joints {
            if f >= n || std::mem::replace(&mut seen[f], true) {
                return Err(Error::validation(format!("invalid or repeated foot joint {f}")));
            }
        }
        if self.offsets.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::validation("non-finite joint offset"));
        }
        Ok(())
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn root_index(&self) -> usize {
        0
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        let p = self.parents[j];
        (p >= 0).then_some(p as usize)
    }

    pub fn rotated_joints(&self) -> Vec<usize> {
        (0..self.num_joints()).filter(|&j| self.rotated[j]).collect()
    }

    /// Closest joint at or above `j` that carries rotation channels.
    pub fn rotated_ancestor(&self, mut j: usize) -> usize {
        while !self.rotated[j] {
            j = self.parents[j] as usize;
        }
        j
    }

    /// All-pairs edge distances on the joint tree.
    pub fn tree_distances(&self) -> Vec<Vec<usize>> {
        let n = self.num_joints();
        let mut adj = vec![Vec::new(); n];
        for j in 1..n {
            let p = self.parents[j] as usize;
            adj[j].push(p);
            adj[p].push(j);
        }
        (0..n)
            .map(|src| {
                let mut dist = vec![usize::MAX; n];
                dist[src] = 0;
                let mut queue = std::collections::VecDeque::from([src]);
                while let Some(u) = queue.pop_front() {
                    for &v in &adj[u] {
                        if dist[v] == usize::MAX {
                            dist[v] = dist[u] + 1;
                            queue.push_back(v);
                        }
                    }
                }
                dist
            })
            .collect()
    }

    /// Eight rotated joints (pelvis, spine, two three-joint legs) plus toe
    /// and heel sites on each foot. Y is up, meters.
    pub fn biped() -> Self {
        let names = [
            "pelvis", "spine", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle", "l_toe", "l_heel",
            "r_toe", "r_heel",
        ];
        let parents = vec![-1, 0, 0, 2, 3, 0, 5, 6, 4, 4, 7, 7];
        let offsets = vec![
            [0.0, 0.93, 0.0],
            [0.0, 0.30, 0.0],
            [0.09, -0.05, 0.0],
            [0.0, -0.42, 0.0],
            [0.0, -0.40, 0.0],
            [-0.09, -0.05, 0.0],
            [0.0, -0.42, 0.0],
            [0.0, -0.40, 0.0],
            [0.0, -0.06, 0.14],
            [0.0, -0.06, -0.05],
            [0.0, -0.06, 0.14],
            [0.0, -0.06, -0.05],
        ];
        let rotated = (0..12).map(|j| j < 8).collect();
        Self::new(names.iter().map(|s| s.to_string()).collect(), parents, offsets, rotated, vec![8, 9, 10, 11])
            .expect("built-in skeleton is valid")
    }
}

/// A joint and the first column of its channel block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointChannels {
    pub joint: usize,
    pub start: usize,
}

/// Where each symbol of a frame lives in the feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    /// Six columns each.
    pub rotations: Vec<JointChannels>,
    /// Start of the three root-displacement columns.
    pub root_displacement: usize,
    /// One column each.
    pub contacts: Vec<JointChannels>,
    pub channels: usize,
}

/// A frame split into its named parts.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameParts {
    pub rotations: Vec<[f64; 6]>,
    pub root_displacement: [f64; 3],
    pub contacts: Vec<f64>,
}

impl ChannelLayout {
    /// Rotations first (joint order), then root displacement, then contacts.
    pub fn canonical(skeleton: &Skeleton) -> Self {
        let rot = skeleton.rotated_joints();
        let k = rot.len();
        let rotations = rot.iter().enumerate().map(|(r, &joint)| JointChannels { joint, start: r * ROT_DIM }).collect();
        let root_displacement = k * ROT_DIM;
        let contacts = skeleton
            .foot_joints
            .iter()
            .enumerate()
            .map(|(c, &joint)| JointChannels { joint, start: root_displacement + 3 + c })
            .collect();
        Self { rotations, root_displacement, contacts, channels: k * ROT_DIM + 3 + skeleton.foot_joints.len() }
    }

    pub fn num_rotations(&self) -> usize {
        self.rotations.len()
    }

    pub fn num_contacts(&self) -> usize {
        self.contacts.len()
    }

    pub fn root_range(&self) -> std::ops::Range<usize> {
        self.root_displacement..self.root_displacement + 3
    }

    pub fn contact_columns(&self) -> Vec<usize> {
        self.contacts.iter().map(|c| c.start).collect()
    }

    /// Slices are disjoint and cover exactly `channels` columns.
    pub fn validate(&self) -> Result<()> {
        let mut owner = vec![false; self.channels];
        let mut claim = |start: usize, width: usize| -> Result<()> {
            for c in start..start + width {
                match owner.get_mut(c) {
                    Some(o) if !*o => *o = true,
                    Some(_) => return Err(Error::validation(format!("channel {c} claimed twice"))),
                    None => return Err(Error::validation(format!("channel {c} out of range {}", self.channels))),
                }
            }
            Ok(())
        };
        for r in &self.rotations {
            claim(r.start, ROT_DIM)?;
        }
        claim(self.root_displacement, 3)?;
        for c in &self.contacts {
            claim(c.start, 1)?;
        }
        if let Some(c) = owner.iter().position(|o| !o) {
            return Err(Error::validation(format!("channel {c} not covered by the layout")));
        }
        Ok(())
    }

    pub fn check_against(&self, skeleton: &Skeleton) -> Result<()> {
        self.validate()?;
        let joints: Vec<usize> = self.rotations.iter().map(|r| r.joint).collect();
        if joints != skeleton.rotated_joints() {
            return Err(Error::validation("layout rotation joints differ from the skeleton's rotated joints"));
        }
        let feet: Vec<usize> = self.contacts.iter().map(|c| c.joint).collect();
        if feet != skeleton.foot_joints {
            return Err(Error::validation("layout contact joints differ from the skeleton's foot joints"));
        }
        Ok(())
    }

    pub fn unpack(&self, frame: &[f64]) -> FrameParts {
        assert_eq!(frame.len(), self.channels);
        let rotations = self
            .rotations
            .iter()
            .map(|r| {
                let mut a = [0.0; 6];
                a.copy_from_slice(&frame[r.start..r.start + ROT_DIM]);
                a
            })
            .collect();
        let d = self.root_displacement;
        FrameParts {
            rotations,
            root_displacement: [frame[d], frame[d + 1], frame[d + 2]],
            contacts: self.contacts.iter().map(|c| frame[c.start]).collect(),
        }
    }

    pub fn pack(&self, parts: &FrameParts) -> Vec<f64> {
        assert_eq!(parts.rotations.len(), self.rotations.len());
        assert_eq!(parts.contacts.len(), self.contacts.len());
        let mut out = vec![0.0; self.channels];
        for (r, rot) in self.rotations.iter().zip(&parts.rotations) {
            out[r.start..r.start + ROT_DIM].copy_from_slice(rot);
        }
        out[self.root_range()].copy_from_slice(&parts.root_displacement);
        for (c, &v) in self.contacts.iter().zip(&parts.contacts) {
            out[c.start] = v;
        }
        out
    }
}

/// `T×D` frame-major features at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Tensor,
    pub fps: f64,
    pub layout: ChannelLayout,
    pub skeleton: Arc<Skeleton>,
}

impl MotionSequence {
    pub fn new(frames: Tensor, fps: f64, layout: ChannelLayout, skeleton: Arc<Skeleton>) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::validation("motion sequence has no frames"));
        }
        if frames.cols() != layout.channels {
            return Err(Error::validation(format!(
                "frame width {} differs from layout width {}",
                frames.cols(),
                layout.channels
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::validation(format!("invalid frame rate {fps}")));
        }
        if !frames.is_finite() {
            return Err(Error::validation("motion sequence contains non-finite values"));
        }
        layout.check_against(&skeleton)?;
        Ok(Self { frames, fps, layout, skeleton })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }

    /// Same skeleton and layout, new frames and rate.
    pub fn with_frames(&self, frames: Tensor, fps: f64) -> Self {
        assert_eq!(frames.cols(), self.layout.channels);
        Self { frames, fps, layout: self.layout.clone(), skeleton: self.skeleton.clone() }
    }

    /// Every rotation block re-encoded from its orthonormalized matrix.
    pub fn orthonormalized(&self) -> Result<Self> {
        let mut frames = self.frames.clone();
        for t in 0..self.len() {
            let row = frames.row_mut(t);
            for r in &self.layout.rotations {
                let m = rot6d_to_matrix(&row[r.start..r.start + ROT_DIM])?;
                row[r.start..r.start + ROT_DIM].copy_from_slice(&matrix_to_rot6d_unchecked(&m));
            }
        }
        Ok(self.with_frames(frames, self.fps))
    }
}

/// Gram-Schmidt reconstruction of a rotation from its first two columns.
pub fn rot6d_to_matrix(r: &[f64]) -> Result<Matrix3<f64>> {
    if r.len() != ROT_DIM {
        return Err(Error::validation(format!("6D rotation has {} entries", r.len())));
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateRotation("non-finite 6D features".into()));
    }
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    if n1 < 1e-12 {
        return Err(Error::DegenerateRotation("first column has zero norm".into()));
    }
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let n2 = u.norm();
    if n2 < 1e-12 * a2.norm().max(1.0) {
        return Err(Error::DegenerateRotation("second column is parallel to the first".into()));
    }
    let b2 = u / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

fn matrix_to_rot6d_unchecked(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// First two columns of a proper rotation matrix.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<[f64; 6]> {
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    if !(err <= 1e-5) {
        return Err(Error::validation(format!("matrix is not orthonormal (deviation {err:.3e})")));
    }
    if m.determinant() <= 0.0 {
        return Err(Error::validation("matrix is a reflection (det = -1)"));
    }
    Ok(matrix_to_rot6d_unchecked(m))
}

/// World-space joint locations, `T×J×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPositions {
    pub frames: usize,
    pub joints: usize,
    pub data: Vec<[f64; 3]>,
}

impl JointPositions {
    pub fn get(&self, t: usize, j: usize) -> [f64; 3] {
        self.data[t * self.joints + j]
    }
}

/// Rigid forward kinematics over the joint tree.
///
/// The root world position at frame `t` is its rest offset plus the
/// cumulative sum of root displacements over frames `0..=t`.
pub fn forward_kinematics(skeleton: &Skeleton, seq: &MotionSequence) -> Result<JointPositions> {
    seq.layout.check_against(skeleton)?;
    let n = skeleton.num_joints();
    let mut local = vec![Matrix3::identity(); n];
    let mut world_rot = vec![Matrix3::identity(); n];
    let mut data = Vec::with_capacity(seq.len() * n);
    let mut root = Vector3::from(skeleton.offsets[0]);
    let d = seq.layout.root_displacement;
    for t in 0..seq.len() {
        let row = seq.frames.row(t);
        for r in &seq.layout.rotations {
            local[r.joint] = rot6d_to_matrix(&row[r.start..r.start + ROT_DIM])?;
        }
        root += Vector3::new(row[d], row[d + 1], row[d + 2]);
        let base = data.len();
        for j in 0..n {
            match skeleton.parent(j) {
                None => {
                    world_rot[j] = local[j];
                    data.push([root.x, root.y, root.z]);
                }
                Some(p) => {
                    let pp: [f64; 3] = data[base + p];
                    let off = world_rot[p] * Vector3::from(skeleton.offsets[j]);
                    world_rot[j] = world_rot[p] * local[j];
                    data.push([pp[0] + off.x, pp[1] + off.y, pp[2] + off.z]);
                }
            }
        }
    }
    Ok(JointPositions { frames: seq.len(), joints: n, data })
}

/// Per-frame speed of each selected joint (meters/frame). Frame 0 copies
/// frame 1.
pub fn joint_velocities(pos: &JointPositions, joints: &[usize]) -> Result<Tensor> {
    if pos.frames < 2 {
        return Err(Error::validation("velocities need at least two frames"));
    }
    if let Some(&j) = joints.iter().find(|&&j| j >= pos.joints) {
        return Err(Error::validation(format!("joint {j} out of range")));
    }
    let mut out = Tensor::zeros(pos.frames, joints.len());
    for t in 1..pos.frames {
        for (c, &j) in joints.iter().enumerate() {
            let (a, b) = (pos.get(t, j), pos.get(t - 1, j));
            let v = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            out.set(t, c, v);
        }
    }
    for c in 0..joints.len() {
        let v = out.get(1, c);
        out.set(0, c, v);
    }
    Ok(out)
}

/// 1 where the speed is strictly below `eps_contact`, else 0.
pub fn compute_contact_labels(velocities: &Tensor, eps_contact: f64) -> Result<Tensor> {
    if !(eps_contact > 0.0) {
        return Err(Error::validation(format!("contact threshold must be positive, got {eps_contact}")));
    }
    Ok(velocities.map(|v| if v < eps_contact { 1.0 } else { 0.0 }))
}

/// Replaces the contact channels with labels derived from the foot-joint
/// velocities of the sequence's own kinematics.
pub fn label_contacts(seq: &MotionSequence, eps_contact: f64) -> Result<MotionSequence> {
    let pos = forward_kinematics(&seq.skeleton, seq)?;
    let vel = joint_velocities(&pos, &seq.skeleton.foot_joints)?;
    let labels = compute_contact_labels(&vel, eps_contact)?;
    let mut frames = seq.frames.clone();
    for t in 0..seq.len() {
        for (c, ch) in seq.layout.contacts.iter().enumerate() {
            frames.set(t, ch.start, labels.get(t, c));
        }
    }
    Ok(seq.with_frames(frames, seq.fps))
}

/// Axis-angle rotation matrix (Rodrigues).
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
    let a = Vector3::from(axis).normalize();
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(a), angle).into_inner()
}

/// 6D features of the identity rotation.
pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain2() -> Arc<Skeleton> {
        Arc::new(
            Skeleton::new(
                vec!["root".into(), "child".into()],
                vec![-1, 0],
                vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
                vec![true, true],
                vec![1],
            )
            .unwrap(),
        )
    }

    fn constant_seq(skel: &Arc<Skeleton>, t: usize, rot: [f64; 6], disp: [f64; 3]) -> MotionSequence {
        let layout = ChannelLayout::canonical(skel);
        let parts = FrameParts {
            rotations: vec![rot; layout.num_rotations()],
            root_displacement: disp,
            contacts: vec![0.0; layout.num_contacts()],
        };
        let row = layout.pack(&parts);
        let frames = Tensor::from_fn(t, layout.channels, |_, c| row[c]);
        MotionSequence::new(frames, 25.0, layout, skel.clone()).unwrap()
    }

    #[test]
    fn identity_6d_is_identity_matrix() {
        assert_eq!(rot6d_to_matrix(&IDENTITY_6D).unwrap(), Matrix3::identity());
        assert_eq!(matrix_to_rot6d(&Matrix3::identity()).unwrap(), IDENTITY_6D);
    }

    #[test]
    fn quarter_turn_about_z_from_6d() {
        // Gram-Schmidt by hand: b1 = (0,1,0), b2 = (-1,0,0), b3 = b1 × b2 = (0,0,1).
        let m = rot6d_to_matrix(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((m - expected).abs().max() < 1e-15);
        assert!((m - axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2)).abs().max() < 1e-15);
    }

    #[test]
    fn degenerate_and_reflected_inputs_are_rejected() {
        assert!(matches!(rot6d_to_matrix(&[0.0; 6]), Err(Error::DegenerateRotation(_))));
        assert!(matches!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]), Err(Error::DegenerateRotation(_))));
        let reflect = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(matches!(matrix_to_rot6d(&reflect), Err(Error::Validation(_))));
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matrix_to_rot6d(&skew).is_err());
    }

    #[test]
    fn random_rotations_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64)];
            if axis.iter().map(|x| x * x).sum::<f64>() < 1e-6 {
                continue;
            }
            let r = axis_angle(axis, rng.random_range(-3.1..3.1));
            let six = matrix_to_rot6d(&r).unwrap();
            let back = rot6d_to_matrix(&six).unwrap();
            assert!((back - r).abs().max() < 1e-6);
            assert!((back.transpose() * back - Matrix3::identity()).abs().max() < 1e-12);
            assert!((back.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rest_pose_places_joints_at_accumulated_offsets() {
        let skel = Arc::new(Skeleton::biped());
        let seq = constant_seq(&skel, 4, IDENTITY_6D, [0.0; 3]);
        let pos = forward_kinematics(&skel, &seq).unwrap();
        for t in 0..4 {
            // l_toe = pelvis + l_hip + l_knee + l_ankle + l_toe offsets
            let toe = pos.get(t, 8);
            let expected = [0.09, 0.93 - 0.05 - 0.42 - 0.40 - 0.06, 0.14];
            for k in 0..3 {
                assert!((toe[k] - expected[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_displacement_translates_rigidly() {
        let skel = Arc::new(Skeleton::biped());
        let seq = constant_seq(&skel, 5, IDENTITY_6D, [0.1, 0.0, 0.0]);
        let pos = forward_kinematics(&skel, &seq).unwrap();
        for t in 1..5 {
            for j in 0..skel.num_joints() {
                assert!((pos.get(t, j)[0] - pos.get(t - 1, j)[0] - 0.1).abs() < 1e-12);
            }
        }
        let vel = joint_velocities(&pos, &skel.foot_joints).unwrap();
        assert!(vel.data().iter().all(|v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn two_link_chain_under_quarter_turn() {
        let skel = chain2();
        let seq = constant_seq(&skel, 1, [0.0, 1.0, 0.0, -1.0, 0.0, 0.0], [0.0; 3]);
        // identity at the child; the root turns the unit x offset onto +y
        let mut frames = seq.frames.clone();
        frames.row_mut(0)[6..12].copy_from_slice(&IDENTITY_6D);
        let seq = seq.with_frames(frames, 25.0);
        let pos = forward_kinematics(&skel, &seq).unwrap();
        let child = pos.get(0, 1);
        assert!((child[0]).abs() < 1e-15 && (child[1] - 1.0).abs() < 1e-15 && child[2].abs() < 1e-15);
    }

    #[test]
    fn sinusoidal_velocity_matches_closed_form_difference() {
        let n = 100;
        let data: Vec<[f64; 3]> =
            (0..n).map(|t| [(2.0 * std::f64::consts::PI * t as f64 / n as f64).sin(), 0.0, 0.0]).collect();
        let pos = JointPositions { frames: n, joints: 1, data };
        let vel = joint_velocities(&pos, &[0]).unwrap();
        let x = |t: usize| (2.0 * std::f64::consts::PI * t as f64 / n as f64).sin();
        for t in 1..n {
            assert!((vel.get(t, 0) - (x(t) - x(t - 1)).abs()).abs() < 1e-9);
        }
        assert_eq!(vel.get(0, 0), vel.get(1, 0));
        let short = JointPositions { frames: 1, joints: 1, data: vec![[0.0; 3]] };
        assert!(joint_velocities(&short, &[0]).is_err());
    }

    #[test]
    fn contact_labels_use_strict_threshold() {
        let eps = 0.02;
        let v = Tensor::from_vec(1, 3, vec![0.0, 2.0 * eps, eps]);
        let l = compute_contact_labels(&v, eps).unwrap();
        assert_eq!(l.data(), &[1.0, 0.0, 0.0]);
        assert!(compute_contact_labels(&v, 0.0).is_err());
    }

    #[test]
    fn static_pose_has_zero_velocity() {
        let skel = Arc::new(Skeleton::biped());
        let seq = constant_seq(&skel, 6, [0.8, 0.6, 0.0, -0.6, 0.8, 0.0], [0.0; 3]);
        let pos = forward_kinematics(&skel, &seq).unwrap();
        let vel = joint_velocities(&pos, &[0, 4, 8, 11]).unwrap();
        assert!(vel.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn layout_covers_channels_and_rejects_overlap() {
        let skel = Skeleton::biped();
        let layout = ChannelLayout::canonical(&skel);
        assert_eq!(layout.channels, 8 * 6 + 3 + 4);
        layout.check_against(&skel).unwrap();
        let mut bad = layout.clone();
        bad.contacts[0].start = bad.root_displacement;
        assert!(bad.validate().is_err());
        let mut short = layout.clone();
        short.channels += 1;
        assert!(short.validate().is_err());
    }

    #[test]
    fn skeleton_validation() {
        let err = Skeleton::new(
            vec!["a".into(), "b".into()],
            vec![-1, -1],
            vec![[0.0; 3]; 2],
            vec![true, true],
            vec![],
        );
        assert!(err.is_err());
        let cyc = Skeleton::new(vec!["a".into(), "b".into()], vec![-1, 1], vec![[0.0; 3]; 2], vec![true; 2], vec![]);
        assert!(cyc.is_err());
        let d = Skeleton::biped().tree_distances();
        assert_eq!(d[8][9], 2);
        assert_eq!(d[4][7], 6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pack_unpack_is_exact(values in proptest::collection::vec(-10.0f64..10.0, 55)) {
                let layout = ChannelLayout::canonical(&Skeleton::biped());
                let parts = layout.unpack(&values);
                prop_assert_eq!(layout.pack(&parts), values);
            }

            #[test]
            fn raising_threshold_keeps_contacts(v in proptest::collection::vec(0.0f64..0.1, 1..40), e1 in 0.001f64..0.05, de in 0.0f64..0.05) {
                let vel = Tensor::from_vec(1, v.len(), v);
                let lo = compute_contact_labels(&vel, e1).unwrap();
                let hi = compute_contact_labels(&vel, e1 + de).unwrap();
                for (a, b) in lo.data().iter().zip(hi.data()) {
                    prop_assert!(b >= a);
                }
            }

            #[test]
            fn bone_lengths_are_preserved(seed in 0u64..500, raw in proptest::bool::ANY) {
                let skel = Arc::new(Skeleton::biped());
                let layout = ChannelLayout::canonical(&skel);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = 5;
                let frames = Tensor::from_fn(t, layout.channels, |_, c| {
                    if c < layout.root_displacement {
                        let base = IDENTITY_6D[c % 6];
                        base + if raw { rng.random_range(-0.6..0.6) } else { rng.random_range(-0.2..0.2) }
                    } else {
                        rng.random_range(-0.1..0.1)
                    }
                });
                let seq = MotionSequence::new(frames, 25.0, layout, skel.clone()).unwrap();
                let pos = forward_kinematics(&skel, &seq).unwrap();
                for j in 1..skel.num_joints() {
                    let p = skel.parents[j] as usize;
                    let rest = Vector3::from(skel.offsets[j]).norm();
                    for f in 0..t {
                        let (a, b) = (pos.get(f, j), pos.get(f, p));
                        let len = ((a[0]-b[0]).powi(2) + (a[1]-b[1]).powi(2) + (a[2]-b[2]).powi(2)).sqrt();
                        prop_assert!((len - rest).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
