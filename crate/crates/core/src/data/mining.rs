//! Multimodal ground-truth mining.
//!
//! Sample `b` is a ground truth for query `a` when, after re-expressing `b`'s
//! observation on `a`'s skeleton, the mean per-joint distance over the last
//! three observed frames is at most the threshold. The query's own future is
//! always a member.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::kinematics::{pose_to_spherical, spherical_to_pose, SkeletonTopology, SphericalPose};

/// Number of trailing observation frames compared during mining.
pub const MATCH_FRAMES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalGtIndex {
    pub threshold: f64,
    members: BTreeMap<usize, Vec<usize>>,
}

impl MultimodalGtIndex {
    pub fn from_parts(threshold: f64, members: BTreeMap<usize, Vec<usize>>) -> Self {
        Self { threshold, members }
    }

    pub fn get(&self, id: usize) -> Option<&[usize]> {
        self.members.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.members.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Keeps queries accepted by `query`, and within each query the members
    /// accepted by `member` plus the query itself.
    pub fn restrict(&self, query: impl Fn(usize) -> bool, member: impl Fn(usize) -> bool) -> Self {
        let members = self
            .members
            .iter()
            .filter(|(id, _)| query(**id))
            .map(|(&id, list)| {
                let kept = list.iter().copied().filter(|&m| m == id || member(m)).collect();
                (id, kept)
            })
            .collect();
        Self {
            threshold: self.threshold,
            members,
        }
    }
}

/// The trailing frames of an observation, prepared for repeated comparison.
struct Tail {
    frames: Vec<Vec<[f64; 3]>>,
    spherical: Vec<SphericalPose>,
    lengths: Vec<f64>,
}

fn tail(sample: &Sample, topo: &SkeletonTopology) -> Result<Tail> {
    let n = sample.x.num_frames();
    if n < MATCH_FRAMES {
        return Err(Error::shape(
            format!("observation of sample {}", sample.id),
            format!("at least {MATCH_FRAMES} frames"),
            n,
        ));
    }
    if sample.x.joints() != topo.joint_count() {
        return Err(Error::TopologyMismatch {
            expected: topo.joint_count(),
            actual: sample.x.joints(),
        });
    }
    let frames: Vec<Vec<[f64; 3]>> = (n - MATCH_FRAMES..n).map(|f| sample.x.frame(f).to_vec()).collect();
    let spherical: Vec<SphericalPose> = frames.iter().map(|f| pose_to_spherical(f, topo)).collect();
    let lengths = spherical[MATCH_FRAMES - 1].links.iter().map(|l| l.rho).collect();
    Ok(Tail {
        frames,
        spherical,
        lengths,
    })
}

fn tail_distance(query: &Tail, candidate: &Tail, topo: &SkeletonTopology) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (qf, cs) in query.frames.iter().zip(&candidate.spherical) {
        let mut scaled = cs.clone();
        for (link, &rho) in scaled.links.iter_mut().zip(&query.lengths) {
            link.rho = rho;
        }
        let pose = spherical_to_pose(&scaled, topo);
        for (a, b) in qf.iter().zip(&pose) {
            total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            count += 1;
        }
    }
    total / count as f64
}

/// Skeleton-normalized distance between the observation tails of `query` and
/// `candidate`, in meters.
pub fn observation_distance(query: &Sample, candidate: &Sample, topo: &SkeletonTopology) -> Result<f64> {
    Ok(tail_distance(&tail(query, topo)?, &tail(candidate, topo)?, topo))
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "mining threshold must be finite and >= 0, got {threshold}"
        )));
    }
    Ok(())
}

/// Mines ground truths for every sample against every other sample.
pub fn mine_multimodal_gt(
    samples: &[Sample],
    topo: &SkeletonTopology,
    threshold: f64,
) -> Result<MultimodalGtIndex> {
    let all: Vec<&Sample> = samples.iter().collect();
    mine_against(&all, &all, topo, threshold)
}

/// Mines ground truths for `queries` drawn from `pool`.
pub fn mine_against(
    queries: &[&Sample],
    pool: &[&Sample],
    topo: &SkeletonTopology,
    threshold: f64,
) -> Result<MultimodalGtIndex> {
    check_threshold(threshold)?;
    let pool_tails = pool.iter().map(|s| tail(s, topo)).collect::<Result<Vec<_>>>()?;
    let query_tails = queries.iter().map(|s| tail(s, topo)).collect::<Result<Vec<_>>>()?;
    let rows: Vec<(usize, Vec<usize>)> = queries
        .par_iter()
        .zip(query_tails.par_iter())
        .map(|(q, qt)| {
            let mut members: Vec<usize> = pool
                .iter()
                .zip(&pool_tails)
                .filter(|(c, ct)| c.id == q.id || tail_distance(qt, ct, topo) <= threshold)
                .map(|(c, _)| c.id)
                .collect();
            if !members.contains(&q.id) {
                members.push(q.id);
            }
            members.sort_unstable();
            members.dedup();
            (q.id, members)
        })
        .collect();
    Ok(MultimodalGtIndex {
        threshold,
        members: rows.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::PoseSequence;

    fn sample(id: usize, frames: usize, offset: f64) -> Sample {
        let topo = SkeletonTopology::human17();
        let data: Vec<[f64; 3]> = (0..frames * 17)
            .map(|i| {
                if i % 17 == 0 {
                    [0.0; 3]
                } else {
                    [0.1 * (i % 17) as f64 + offset, 0.05, -0.2 + offset]
                }
            })
            .collect();
        let seq = PoseSequence::new(topo.joint_count(), 25.0, data).unwrap();
        Sample {
            id,
            x: seq.clone(),
            y: seq,
            action_label: "a".into(),
            source_sequence: id,
            start: 0,
        }
    }

    #[test]
    fn zero_threshold_gives_singletons() {
        let samples = vec![sample(0, 4, 0.0), sample(1, 4, 0.3), sample(2, 4, 0.7)];
        let idx = mine_multimodal_gt(&samples, &SkeletonTopology::human17(), 0.0).unwrap();
        for (id, m) in idx.iter() {
            assert_eq!(m, &[id]);
        }
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let samples = vec![sample(0, 2, 0.0)];
        assert!(mine_multimodal_gt(&samples, &SkeletonTopology::human17(), 0.5).is_err());
        let samples = vec![sample(0, 3, 0.0)];
        assert!(mine_multimodal_gt(&samples, &SkeletonTopology::human17(), -1.0).is_err());
    }

    #[test]
    fn restrict_keeps_self() {
        let mut m = BTreeMap::new();
        m.insert(0, vec![0, 1, 2]);
        m.insert(5, vec![1, 5]);
        let idx = MultimodalGtIndex::from_parts(0.5, m);
        let r = idx.restrict(|q| q == 5, |m| m == 2);
        assert_eq!(r.len(), 1);
        assert_eq!(r.get(5).unwrap(), &[5]);
    }
}
