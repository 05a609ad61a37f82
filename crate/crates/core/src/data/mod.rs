//! Motion corpora, observation/future windows and multimodal ground truths.

mod format;
pub mod generator;
pub mod mining;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{zero_center, PoseSequence, SkeletonTopology};

pub use format::{
    corpus_from_str, corpus_to_string, index_from_str, index_to_string, load_corpus, load_index, save_corpus, save_index,
    CORPUS_MAGIC, INDEX_MAGIC,
};
pub use generator::{generate_synthetic_corpus, GeneratorConfig};
pub use mining::{mine_multimodal_gt, MultimodalGtIndex};

/// Rounds to the 6-decimal precision of the on-disk corpus format.
pub fn quantize_micro(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub label: String,
    pub actor_scale: f64,
    pub motion: PoseSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionCorpus {
    pub topology: SkeletonTopology,
    pub sequences: Vec<SequenceRecord>,
}

impl MotionCorpus {
    pub fn validate(&self) -> Result<()> {
        let j = self.topology.joint_count();
        for (i, s) in self.sequences.iter().enumerate() {
            if s.motion.joints() != j {
                return Err(Error::TopologyMismatch {
                    expected: j,
                    actual: s.motion.joints(),
                });
            }
            if !(s.actor_scale > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "sequence {i} has non-positive actor scale"
                )));
            }
        }
        Ok(())
    }
}

/// One observation/future split of a corpus window, both pelvis-centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub x: PoseSequence,
    pub y: PoseSequence,
    pub action_label: String,
    pub source_sequence: usize,
    /// First frame of the window within its source sequence.
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub obs_frames: usize,
    pub future_frames: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            obs_frames: 25,
            future_frames: 100,
            stride: 13,
        }
    }
}

/// Number of windows a sequence of `len` frames yields.
pub fn window_count(len: usize, w: &WindowConfig) -> usize {
    let span = w.obs_frames + w.future_frames;
    if len < span {
        0
    } else {
        (len - span) / w.stride + 1
    }
}

pub fn window_corpus(corpus: &MotionCorpus, w: &WindowConfig) -> Result<Vec<Sample>> {
    if w.obs_frames == 0 || w.future_frames == 0 || w.stride == 0 {
        return Err(Error::InvalidConfig(
            "window lengths and stride must be at least 1".into(),
        ));
    }
    let topo = &corpus.topology;
    let mut samples = Vec::new();
    for (source, seq) in corpus.sequences.iter().enumerate() {
        for k in 0..window_count(seq.motion.num_frames(), w) {
            let start = k * w.stride;
            let mid = start + w.obs_frames;
            let end = mid + w.future_frames;
            samples.push(Sample {
                id: samples.len(),
                x: zero_center(&seq.motion.slice(start, mid)?, topo)?,
                y: zero_center(&seq.motion.slice(mid, end)?, topo)?,
                action_label: seq.label.clone(),
                source_sequence: source,
                start,
            });
        }
    }
    Ok(samples)
}

/// Sample ids partitioned into training and held-out sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Holds out the last `test_fraction` of every label's sequences, so no source
/// sequence contributes windows to both sides.
pub fn split_by_sequence(samples: &[Sample], test_fraction: f64) -> Split {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for s in samples {
        let seqs = by_label.entry(&s.action_label).or_default();
        if !seqs.contains(&s.source_sequence) {
            seqs.push(s.source_sequence);
        }
    }
    let mut held_out = Vec::new();
    for seqs in by_label.values_mut() {
        seqs.sort_unstable();
        let n = ((seqs.len() as f64) * test_fraction).round() as usize;
        let n = if test_fraction > 0.0 && seqs.len() >= 2 {
            n.clamp(1, seqs.len() - 1)
        } else {
            n.min(seqs.len())
        };
        held_out.extend_from_slice(&seqs[seqs.len() - n..]);
    }
    let (test, train): (Vec<&Sample>, Vec<&Sample>) = samples
        .iter()
        .partition(|s| held_out.contains(&s.source_sequence));
    Split {
        train: train.iter().map(|s| s.id).collect(),
        test: test.iter().map(|s| s.id).collect(),
    }
}
