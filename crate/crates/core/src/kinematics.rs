//! Skeleton topology, parent-relative spherical coordinates and motion transfer.
//!
//! Every non-root joint is expressed relative to its parent as `(rho, theta, phi)`:
//! `rho` is the link length, `theta` the polar angle measured from `+z` and
//! `phi = atan2(dy, dx)`. Motion transfer keeps the angles of one sequence and
//! imposes the link lengths of another skeleton's last observed frame.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single pose: one `[x, y, z]` per joint, in meters.
pub type Pose = Vec<[f64; 3]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTopology", into = "RawTopology")]
pub struct SkeletonTopology {
    parents: Vec<Option<usize>>,
    names: Vec<String>,
    order: Vec<usize>,
}

impl SkeletonTopology {
    pub fn new(parents: Vec<Option<usize>>, names: Vec<String>) -> Result<Self> {
        let joints = parents.len();
        if joints == 0 {
            return Err(Error::InvalidTopology("no joints".into()));
        }
        if names.len() != joints {
            return Err(Error::InvalidTopology(format!(
                "{} names for {} joints",
                names.len(),
                joints
            )));
        }
        let roots: Vec<usize> = (0..joints).filter(|&j| parents[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidTopology(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        for (j, parent) in parents.iter().enumerate() {
            if let Some(p) = *parent {
                if p >= joints || p == j {
                    return Err(Error::InvalidTopology(format!(
                        "joint {j} has invalid parent {p}"
                    )));
                }
            }
        }

        // Breadth-first from the root; any joint not reached sits on a cycle.
        let mut children = vec![Vec::new(); joints];
        for (j, parent) in parents.iter().enumerate() {
            if let Some(p) = *parent {
                children[p].push(j);
            }
        }
        let mut order = Vec::with_capacity(joints);
        order.push(roots[0]);
        let mut head = 0;
        while head < order.len() {
            let j = order[head];
            head += 1;
            order.extend_from_slice(&children[j]);
        }
        if order.len() != joints {
            return Err(Error::InvalidTopology("parent relation contains a cycle".into()));
        }

        Ok(Self {
            parents,
            names,
            order,
        })
    }

    /// The 17-joint pelvis-rooted layout used throughout the synthetic corpora.
    pub fn human17() -> Self {
        const PARENTS: [Option<usize>; 17] = [
            None,
            Some(0),
            Some(1),
            Some(2),
            Some(0),
            Some(4),
            Some(5),
            Some(0),
            Some(7),
            Some(8),
            Some(9),
            Some(8),
            Some(11),
            Some(12),
            Some(8),
            Some(14),
            Some(15),
        ];
        const NAMES: [&str; 17] = [
            "pelvis",
            "r_hip",
            "r_knee",
            "r_foot",
            "l_hip",
            "l_knee",
            "l_foot",
            "spine",
            "thorax",
            "neck",
            "head",
            "l_shoulder",
            "l_elbow",
            "l_wrist",
            "r_shoulder",
            "r_elbow",
            "r_wrist",
        ];
        Self::new(
            PARENTS.to_vec(),
            NAMES.iter().map(|s| s.to_string()).collect(),
        )
        .expect("built-in topology is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Joints in root-outward order: every parent precedes its children.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn check(&self, joints: usize) -> Result<()> {
        if joints != self.joint_count() {
            return Err(Error::TopologyMismatch {
                expected: self.joint_count(),
                actual: joints,
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RawTopology {
    parents: Vec<Option<usize>>,
    names: Vec<String>,
}

impl TryFrom<RawTopology> for SkeletonTopology {
    type Error = Error;

    fn try_from(raw: RawTopology) -> Result<Self> {
        SkeletonTopology::new(raw.parents, raw.names)
    }
}

impl From<SkeletonTopology> for RawTopology {
    fn from(t: SkeletonTopology) -> Self {
        RawTopology {
            parents: t.parents,
            names: t.names,
        }
    }
}

/// A timed series of poses over a fixed joint count, stored frame-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    joints: usize,
    fps: f64,
    data: Vec<[f64; 3]>,
}

impl PoseSequence {
    pub fn new(joints: usize, fps: f64, data: Vec<[f64; 3]>) -> Result<Self> {
        if joints == 0 || data.is_empty() {
            return Err(Error::Empty("pose sequence".into()));
        }
        if data.len() % joints != 0 {
            return Err(Error::shape(
                "pose sequence",
                format!("a multiple of {joints} joints"),
                data.len(),
            ));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidConfig(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { joints, fps, data })
    }

    pub fn from_frames(frames: Vec<Pose>, fps: f64) -> Result<Self> {
        let joints = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != joints) {
            return Err(Error::shape("pose sequence", "constant joint count", "ragged frames"));
        }
        Self::new(joints, fps, frames.into_iter().flatten().collect())
    }

    /// Builds a sequence from `frames * joints * 3` coordinates.
    pub fn from_flat(joints: usize, fps: f64, flat: &[f64]) -> Result<Self> {
        if joints == 0 || flat.len() % (joints * 3) != 0 {
            return Err(Error::shape(
                "flat pose data",
                format!("a multiple of {}", joints * 3),
                flat.len(),
            ));
        }
        let data = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(joints, fps, data)
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.joints
    }

    pub fn frame(&self, index: usize) -> &[[f64; 3]] {
        &self.data[index * self.joints..(index + 1) * self.joints]
    }

    pub fn frame_mut(&mut self, index: usize) -> &mut [[f64; 3]] {
        let j = self.joints;
        &mut self.data[index * j..(index + 1) * j]
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[[f64; 3]]> + '_ {
        self.data.chunks_exact(self.joints)
    }

    pub fn last_frame(&self) -> &[[f64; 3]] {
        self.frame(self.num_frames() - 1)
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.data
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.num_frames() {
            return Err(Error::shape(
                "frame slice",
                format!("a nonempty range within 0..{}", self.num_frames()),
                format!("{start}..{end}"),
            ));
        }
        Self::new(
            self.joints,
            self.fps,
            self.data[start * self.joints..end * self.joints].to_vec(),
        )
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.joints != self.joints {
            return Err(Error::TopologyMismatch {
                expected: self.joints,
                actual: other.joints,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(self.joints, self.fps, data)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.data.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.into()))
        }
    }
}

/// Parent-relative spherical link coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Link {
    pub rho: f64,
    pub theta: f64,
    pub phi: f64,
}

impl Link {
    /// Converts a parent-to-child offset. Zero-length links map to all zeros
    /// and `phi` is pinned to 0 on the poles.
    pub fn from_offset(d: [f64; 3]) -> Self {
        let rho = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if rho == 0.0 {
            return Link::default();
        }
        let theta = (d[2] / rho).clamp(-1.0, 1.0).acos();
        let phi = if d[0] == 0.0 && d[1] == 0.0 {
            0.0
        } else {
            let phi = d[1].atan2(d[0]);
            if phi <= -PI {
                PI
            } else {
                phi
            }
        };
        Link { rho, theta, phi }
    }

    pub fn to_offset(self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [
            self.rho * st * cp,
            self.rho * st * sp,
            self.rho * ct,
        ]
    }
}

/// One frame in spherical form. `links[root]` is unused and always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphericalPose {
    pub root: [f64; 3],
    pub links: Vec<Link>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn pose_to_spherical(pose: &[[f64; 3]], topo: &SkeletonTopology) -> SphericalPose {
    let mut links = vec![Link::default(); pose.len()];
    for (j, link) in links.iter_mut().enumerate() {
        if let Some(p) = topo.parent(j) {
            *link = Link::from_offset(sub(pose[j], pose[p]));
        }
    }
    SphericalPose {
        root: pose[topo.root()],
        links,
    }
}

pub fn spherical_to_pose(sph: &SphericalPose, topo: &SkeletonTopology) -> Pose {
    let mut pose = vec![[0.0; 3]; topo.joint_count()];
    for &j in topo.order() {
        pose[j] = match topo.parent(j) {
            None => sph.root,
            Some(p) => add(pose[p], sph.links[j].to_offset()),
        };
    }
    pose
}

pub fn cartesian_to_spherical(
    seq: &PoseSequence,
    topo: &SkeletonTopology,
) -> Result<Vec<SphericalPose>> {
    topo.check(seq.joints())?;
    seq.ensure_finite("pose sequence")?;
    Ok(seq.frames().map(|f| pose_to_spherical(f, topo)).collect())
}

pub fn spherical_to_cartesian(
    sph: &[SphericalPose],
    topo: &SkeletonTopology,
    fps: f64,
) -> Result<PoseSequence> {
    if sph.is_empty() {
        return Err(Error::Empty("spherical sequence".into()));
    }
    let mut data = Vec::with_capacity(sph.len() * topo.joint_count());
    for frame in sph {
        topo.check(frame.links.len())?;
        data.extend(spherical_to_pose(frame, topo));
    }
    PoseSequence::new(topo.joint_count(), fps, data)
}

/// Re-expresses the motion of `y` on the skeleton of `x`'s last frame.
///
/// The output has `y`'s frame count, root trajectory and per-link angles, and
/// the link lengths of `x`'s final pose on every frame.
pub fn motion_transfer(
    x: &PoseSequence,
    y: &PoseSequence,
    topo: &SkeletonTopology,
) -> Result<PoseSequence> {
    topo.check(x.joints())?;
    topo.check(y.joints())?;
    x.ensure_finite("skeleton reference")?;
    let reference = pose_to_spherical(x.last_frame(), topo);
    let lengths: Vec<f64> = reference.links.iter().map(|l| l.rho).collect();
    let mut motion = cartesian_to_spherical(y, topo)?;
    for frame in &mut motion {
        for (link, &rho) in frame.links.iter_mut().zip(&lengths) {
            link.rho = rho;
        }
    }
    spherical_to_cartesian(&motion, topo, y.fps())
}

/// Multiplies every link length by `factor`, keeping angles and the root.
pub fn scale_skeleton(
    seq: &PoseSequence,
    topo: &SkeletonTopology,
    factor: f64,
) -> Result<PoseSequence> {
    let mut sph = cartesian_to_spherical(seq, topo)?;
    for frame in &mut sph {
        for link in &mut frame.links {
            link.rho *= factor;
        }
    }
    spherical_to_cartesian(&sph, topo, seq.fps())
}

/// Translates every frame so the root joint sits at the origin.
pub fn zero_center(seq: &PoseSequence, topo: &SkeletonTopology) -> Result<PoseSequence> {
    topo.check(seq.joints())?;
    let root = topo.root();
    let mut out = seq.clone();
    for f in 0..out.num_frames() {
        let frame = out.frame_mut(f);
        let r = frame[root];
        for p in frame.iter_mut() {
            *p = sub(*p, r);
        }
        // Exact zero even when r has a signed-zero or rounding residue.
        frame[root] = [0.0; 3];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, joints: usize) -> Pose {
        (0..joints)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn axis_aligned_unit_link() {
        let l = Link::from_offset([0.0, 0.0, 1.0]);
        assert_eq!(l, Link { rho: 1.0, theta: 0.0, phi: 0.0 });
        let down = Link::from_offset([0.0, 0.0, -2.0]);
        assert_eq!(down.theta, PI);
        assert_eq!(down.phi, 0.0);
    }

    #[test]
    fn phi_never_minus_pi() {
        let l = Link::from_offset([-1.0, -0.0, 0.0]);
        assert_eq!(l.phi, PI);
    }

    #[test]
    fn zero_length_link_is_total() {
        assert_eq!(Link::from_offset([0.0; 3]), Link::default());
        assert_eq!(Link::default().to_offset(), [0.0; 3]);
    }

    #[test]
    fn closed_form_oracle_matches() {
        let topo = SkeletonTopology::human17();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&mut rng, 17);
        let sph = pose_to_spherical(&pose, &topo);
        for j in 1..17 {
            let p = topo.parent(j).unwrap();
            let d = sub(pose[j], pose[p]);
            let rho = (d[0].powi(2) + d[1].powi(2) + d[2].powi(2)).sqrt();
            assert_eq!(sph.links[j].rho, rho);
            assert_eq!(sph.links[j].theta, (d[2] / rho).acos());
            assert_eq!(sph.links[j].phi, d[1].atan2(d[0]));
        }
        assert_eq!(sph.root, pose[0]);
    }

    #[test]
    fn zero_rho_collapses_to_root() {
        let topo = SkeletonTopology::human17();
        let sph = SphericalPose {
            root: [0.3, -0.2, 1.0],
            links: vec![
                Link {
                    rho: 0.0,
                    theta: 1.0,
                    phi: 0.5
                };
                17
            ],
        };
        let pose = spherical_to_pose(&sph, &topo);
        assert!(pose.iter().all(|p| *p == [0.3, -0.2, 1.0]));
    }

    #[test]
    fn doubling_lengths_doubles_chain_distance() {
        let topo = SkeletonTopology::human17();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pose = random_pose(&mut rng, 17);
        pose[0] = [0.0; 3];
        let seq = PoseSequence::from_frames(vec![pose.clone()], 25.0).unwrap();
        let doubled = scale_skeleton(&seq, &topo, 2.0).unwrap();
        // Chain-sum oracle: offset from root is the sum of link offsets along the path.
        for j in 0..17 {
            let mut chain = [0.0; 3];
            let mut k = j;
            while let Some(p) = topo.parent(k) {
                chain = add(chain, sub(pose[k], pose[p]));
                k = p;
            }
            for c in 0..3 {
                assert!((doubled.frame(0)[j][c] - 2.0 * chain[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_topologies() {
        let names = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
        assert!(SkeletonTopology::new(vec![None, None], names(2)).is_err());
        assert!(SkeletonTopology::new(vec![Some(1), Some(0)], names(2)).is_err());
        assert!(SkeletonTopology::new(vec![None, Some(2), Some(1)], names(3)).is_err());
        assert!(SkeletonTopology::new(vec![None, Some(5)], names(2)).is_err());
        assert!(SkeletonTopology::new(vec![None, Some(0)], names(1)).is_err());
        // Parent indices need not precede children.
        assert!(SkeletonTopology::new(vec![Some(2), Some(2), None], names(3)).is_ok());
    }

    #[test]
    fn mismatched_and_non_finite_inputs_error() {
        let topo = SkeletonTopology::human17();
        let seq = PoseSequence::new(3, 25.0, vec![[0.0; 3]; 6]).unwrap();
        assert!(matches!(
            cartesian_to_spherical(&seq, &topo),
            Err(Error::TopologyMismatch { .. })
        ));
        let mut bad = vec![[0.0; 3]; 17];
        bad[4][1] = f64::NAN;
        let seq = PoseSequence::from_frames(vec![bad], 25.0).unwrap();
        assert!(matches!(
            cartesian_to_spherical(&seq, &topo),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn zero_center_translation_invariant_and_idempotent() {
        let topo = SkeletonTopology::human17();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<Pose> = (0..4).map(|_| random_pose(&mut rng, 17)).collect();
        let seq = PoseSequence::from_frames(frames.clone(), 25.0).unwrap();
        let shifted = PoseSequence::from_frames(
            frames
                .iter()
                .map(|f| f.iter().map(|p| add(*p, [3.0, -1.5, 0.25])).collect())
                .collect(),
            25.0,
        )
        .unwrap();
        let a = zero_center(&seq, &topo).unwrap();
        let b = zero_center(&shifted, &topo).unwrap();
        for (pa, pb) in a.positions().iter().zip(b.positions()) {
            for c in 0..3 {
                assert!((pa[c] - pb[c]).abs() < 1e-12);
            }
        }
        for f in a.frames() {
            assert_eq!(f[0], [0.0; 3]);
        }
        assert_eq!(zero_center(&a, &topo).unwrap(), a);
    }

    #[test]
    fn motion_transfer_requires_nonempty_reference() {
        let topo = SkeletonTopology::human17();
        assert!(PoseSequence::new(17, 25.0, vec![]).is_err());
        let y = PoseSequence::new(17, 25.0, vec![[0.0; 3]; 17]).unwrap();
        let x = PoseSequence::new(3, 25.0, vec![[0.0; 3]; 3]).unwrap();
        assert!(motion_transfer(&x, &y, &topo).is_err());
    }
}
