//! Procedural humanoid motion corpus.
//!
//! Every sequence starts from the same quiet standing pose (with a slow,
//! per-sequence sway) and then blends into one of several motion families.
//! Observation windows that end inside the standing prefix are therefore
//! followed by futures from every family: the corpus is multimodal by
//! construction.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{quantize_micro, MotionCorpus, SequenceRecord};
use crate::error::{Error, Result};
use crate::kinematics::{PoseSequence, SkeletonTopology};

pub const FAMILY_NAMES: [&str; 8] = [
    "walk",
    "raise_arms",
    "turn",
    "sit",
    "wave",
    "kick",
    "crouch",
    "bow",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub joints: usize,
    pub fps: f64,
    pub families: usize,
    pub sequences_per_family: usize,
    /// Length of the shared standing prefix, in frames.
    pub idle_frames: usize,
    /// Uniform jitter applied to the prefix length, in frames.
    pub idle_jitter: usize,
    pub action_frames: usize,
    pub actor_scale_min: f64,
    pub actor_scale_max: f64,
    /// Standard deviation of per-coordinate positional noise, meters.
    pub noise: f64,
    /// Relative jitter of per-sequence speed and amplitude.
    pub variation: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            joints: 17,
            fps: 25.0,
            families: 5,
            sequences_per_family: 12,
            idle_frames: 40,
            idle_jitter: 6,
            action_frames: 110,
            actor_scale_min: 0.85,
            actor_scale_max: 1.15,
            noise: 0.002,
            variation: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.joints != 17 {
            return bad(format!(
                "the humanoid generator has 17 joints, config asks for {}",
                self.joints
            ));
        }
        if self.families < 2 || self.families > FAMILY_NAMES.len() {
            return bad(format!(
                "families must be in 2..={}, got {}",
                FAMILY_NAMES.len(),
                self.families
            ));
        }
        if self.sequences_per_family == 0 || self.action_frames == 0 {
            return bad("sequences_per_family and action_frames must be positive".into());
        }
        if self.idle_jitter > self.idle_frames {
            return bad("idle_jitter exceeds idle_frames".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.actor_scale_min > 0.0 && self.actor_scale_min <= self.actor_scale_max) {
            return bad("actor scale range must be positive and ordered".into());
        }
        if !(self.noise >= 0.0 && self.variation >= 0.0 && self.variation < 1.0) {
            return bad("noise must be >= 0 and variation in [0, 1)".into());
        }
        Ok(())
    }
}

/// Rest offsets (child relative to parent) in meters, z up, y forward.
const REST: [[f64; 3]; 17] = [
    [0.0, 0.0, 0.0],
    [-0.12, 0.0, 0.0],
    [0.0, 0.0, -0.45],
    [0.0, 0.0, -0.44],
    [0.12, 0.0, 0.0],
    [0.0, 0.0, -0.45],
    [0.0, 0.0, -0.44],
    [0.0, 0.0, 0.22],
    [0.0, 0.0, 0.25],
    [0.0, 0.0, 0.10],
    [0.0, 0.0, 0.12],
    [0.16, 0.0, 0.02],
    [0.0, 0.0, -0.28],
    [0.0, 0.0, -0.25],
    [-0.16, 0.0, 0.02],
    [0.0, 0.0, -0.28],
    [0.0, 0.0, -0.25],
];

const PELVIS_HEIGHT: f64 = 0.92;

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Joint angles driving one frame. Flexion rotates about the lateral x axis
/// (positive swings a hanging limb forward), abduction about the forward y axis.
#[derive(Debug, Clone, Copy, Default)]
struct Angles {
    root_yaw: f64,
    root_forward: f64,
    root_drop: f64,
    spine_flex: f64,
    neck_flex: f64,
    hip_flex: [f64; 2],
    knee_flex: [f64; 2],
    shoulder_flex: [f64; 2],
    shoulder_abd: [f64; 2],
    elbow_flex: [f64; 2],
}

// Index 0 is the left side, 1 the right side.
const HIP: [usize; 2] = [4, 1];
const KNEE: [usize; 2] = [5, 2];
const SHOULDER: [usize; 2] = [11, 14];
const ELBOW: [usize; 2] = [12, 15];

fn forward_kinematics(angles: &Angles, scale: f64, topo: &SkeletonTopology) -> Vec<[f64; 3]> {
    let identity: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut local = [identity; 17];
    local[0] = rot_z(angles.root_yaw);
    local[7] = rot_x(angles.spine_flex);
    local[9] = rot_x(angles.neck_flex);
    for side in 0..2 {
        local[HIP[side]] = rot_x(angles.hip_flex[side]);
        local[KNEE[side]] = rot_x(angles.knee_flex[side]);
        // Abduction lifts the left arm toward +x and the right arm toward -x.
        let abd = if side == 0 {
            -angles.shoulder_abd[side]
        } else {
            angles.shoulder_abd[side]
        };
        local[SHOULDER[side]] = mat_mul(&rot_y(abd), &rot_x(angles.shoulder_flex[side]));
        local[ELBOW[side]] = rot_x(angles.elbow_flex[side]);
    }

    let mut global = [identity; 17];
    let mut pos = vec![[0.0; 3]; 17];
    for &j in topo.order() {
        match topo.parent(j) {
            None => {
                global[j] = local[j];
                pos[j] = [
                    0.0,
                    angles.root_forward,
                    (PELVIS_HEIGHT - angles.root_drop) * scale,
                ];
            }
            Some(p) => {
                let off = REST[j].map(|v| v * scale);
                let d = mat_vec(&global[p], off);
                pos[j] = [pos[p][0] + d[0], pos[p][1] + d[1], pos[p][2] + d[2]];
                global[j] = mat_mul(&global[p], &local[j]);
            }
        }
    }
    pos
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Per-sequence randomization.
#[derive(Debug, Clone, Copy)]
struct Style {
    speed: f64,
    amplitude: f64,
    sway_phase: f64,
    sway_rate: f64,
}

fn idle(t: f64, style: &Style) -> Angles {
    let s = (2.0 * PI * style.sway_rate * t + style.sway_phase).sin();
    Angles {
        spine_flex: 0.02 * s,
        shoulder_abd: [0.04 + 0.01 * s, 0.04 - 0.01 * s],
        elbow_flex: [0.05, 0.05],
        ..Angles::default()
    }
}

/// Angles of `family` at `tau` seconds after onset, added onto the idle pose.
fn action(family: usize, tau: f64, style: &Style, base: Angles) -> Angles {
    let a = style.amplitude;
    let tau = tau * style.speed;
    let mut q = base;
    match family {
        0 => {
            // walk
            let ramp = smoothstep(tau / 0.6);
            let w = 2.0 * PI * 0.9 * tau;
            let swing = 0.45 * a * ramp * w.sin();
            q.hip_flex = [swing, -swing];
            q.knee_flex = [
                -0.7 * a * ramp * (w - 0.6).sin().max(0.0),
                -0.7 * a * ramp * (-(w - 0.6).sin()).max(0.0),
            ];
            q.shoulder_flex = [-0.6 * swing, 0.6 * swing];
            q.elbow_flex = [0.2 + 0.15 * ramp, 0.2 + 0.15 * ramp];
            q.root_forward = 1.1 * a * (tau - 0.3).max(0.0);
        }
        1 => {
            // raise both arms overhead
            let ramp = smoothstep(tau / 1.2);
            q.shoulder_flex = [2.7 * a * ramp, 2.7 * a * ramp];
            q.elbow_flex = [0.2 * ramp, 0.2 * ramp];
            q.neck_flex -= 0.15 * ramp;
        }
        2 => {
            // turn in place
            let ramp = smoothstep(tau / 1.6);
            q.root_yaw = 1.6 * a * ramp;
            let step = 0.25 * a * (2.0 * PI * 1.2 * tau).sin() * (1.0 - (2.0 * ramp - 1.0).powi(2));
            q.hip_flex = [step, -step];
        }
        3 => {
            // sit down
            let ramp = smoothstep(tau / 1.4);
            q.hip_flex = [1.45 * a * ramp, 1.45 * a * ramp];
            q.knee_flex = [-1.5 * a * ramp, -1.5 * a * ramp];
            q.spine_flex -= 0.3 * a * ramp;
            q.shoulder_flex = [0.5 * ramp, 0.5 * ramp];
            q.root_drop = 0.42 * ramp;
        }
        4 => {
            // wave with the right hand
            let ramp = smoothstep(tau / 0.9);
            q.shoulder_abd[1] = 1.7 * a * ramp;
            q.elbow_flex[1] = ramp * (1.3 + 0.55 * a * (2.0 * PI * 1.6 * tau).sin());
        }
        5 => {
            // repeated kicks with the right leg
            let ramp = smoothstep(tau / 0.5);
            let k = (2.0 * PI * 0.7 * tau).sin().max(0.0);
            q.hip_flex[1] = 1.3 * a * ramp * k * k;
            q.knee_flex[1] = -0.9 * ramp * (1.0 - k);
            q.shoulder_abd = [0.5 * ramp, 0.5 * ramp];
        }
        6 => {
            // crouch
            let ramp = smoothstep(tau / 1.0);
            q.hip_flex = [0.9 * a * ramp, 0.9 * a * ramp];
            q.knee_flex = [-1.9 * a * ramp, -1.9 * a * ramp];
            q.spine_flex -= 0.5 * ramp;
            q.shoulder_flex = [0.9 * ramp, 0.9 * ramp];
            q.root_drop = 0.35 * ramp;
        }
        _ => {
            // bow and come back up
            let hump = (PI * (tau / 2.4).clamp(0.0, 1.0)).sin();
            q.spine_flex -= 1.1 * a * hump;
            q.neck_flex -= 0.3 * hump;
            q.shoulder_flex = [0.4 * hump, 0.4 * hump];
        }
    }
    q
}

pub fn generate_synthetic_corpus(config: &GeneratorConfig, seed: u64) -> Result<MotionCorpus> {
    config.validate()?;
    let topo = SkeletonTopology::human17();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let dt = 1.0 / config.fps;
    let v = config.variation;

    let mut sequences = Vec::with_capacity(config.families * config.sequences_per_family);
    for family in 0..config.families {
        for _ in 0..config.sequences_per_family {
            let scale = quantize_micro(
                rng.random_range(config.actor_scale_min..=config.actor_scale_max),
            );
            let style = Style {
                speed: 1.0 + rng.random_range(-v..=v),
                amplitude: 1.0 + rng.random_range(-v..=v),
                sway_phase: rng.random_range(0.0..2.0 * PI),
                sway_rate: rng.random_range(0.2..0.35),
            };
            let jitter = config.idle_jitter as i64;
            let idle_len =
                (config.idle_frames as i64 + rng.random_range(-jitter..=jitter)) as usize;
            let len = idle_len + config.action_frames;

            let mut data = Vec::with_capacity(len * 17);
            for f in 0..len {
                let t = f as f64 * dt;
                let base = idle(t, &style);
                let angles = if f < idle_len {
                    base
                } else {
                    action(family, (f - idle_len) as f64 * dt, &style, base)
                };
                for p in forward_kinematics(&angles, scale, &topo) {
                    data.push(p.map(|c| {
                        let n = if config.noise > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                        quantize_micro(c + n)
                    }));
                }
            }
            sequences.push(SequenceRecord {
                label: FAMILY_NAMES[family].to_string(),
                actor_scale: scale,
                motion: PoseSequence::new(17, config.fps, data)?,
            });
        }
    }
    Ok(MotionCorpus {
        topology: topo,
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::pose_to_spherical;

    #[test]
    fn rest_pose_has_scaled_link_lengths() {
        let topo = SkeletonTopology::human17();
        let pose = forward_kinematics(&Angles::default(), 1.1, &topo);
        let sph = pose_to_spherical(&pose, &topo);
        for j in 1..17 {
            let rest = REST[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((sph.links[j].rho - 1.1 * rest).abs() < 1e-12);
        }
    }

    #[test]
    fn rotations_preserve_link_lengths() {
        let topo = SkeletonTopology::human17();
        let style = Style {
            speed: 1.0,
            amplitude: 1.0,
            sway_phase: 0.3,
            sway_rate: 0.25,
        };
        for family in 0..8 {
            let q = action(family, 0.8, &style, idle(0.8, &style));
            let pose = forward_kinematics(&q, 1.0, &topo);
            let sph = pose_to_spherical(&pose, &topo);
            for j in 1..17 {
                let rest = REST[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((sph.links[j].rho - rest).abs() < 1e-12, "family {family} joint {j}");
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = GeneratorConfig::default();
        for cfg in [
            GeneratorConfig { families: 1, ..base.clone() },
            GeneratorConfig { families: 9, ..base.clone() },
            GeneratorConfig { joints: 0, ..base.clone() },
            GeneratorConfig { sequences_per_family: 0, ..base.clone() },
            GeneratorConfig { fps: 0.0, ..base.clone() },
            GeneratorConfig { actor_scale_min: -1.0, ..base.clone() },
        ] {
            assert!(matches!(
                generate_synthetic_corpus(&cfg, 1),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn cardinality_and_labels() {
        let cfg = GeneratorConfig {
            families: 3,
            sequences_per_family: 10,
            action_frames: 10,
            idle_frames: 5,
            idle_jitter: 1,
            ..GeneratorConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg, 4).unwrap();
        assert_eq!(corpus.sequences.len(), 30);
        let mut labels: Vec<&str> = corpus.sequences.iter().map(|s| s.label.as_str()).collect();
        labels.dedup();
        assert_eq!(labels, vec!["walk", "raise_arms", "turn"]);
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = GeneratorConfig {
            sequences_per_family: 2,
            action_frames: 20,
            ..GeneratorConfig::default()
        };
        let a = generate_synthetic_corpus(&cfg, 9).unwrap();
        let b = generate_synthetic_corpus(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&cfg, 10).unwrap();
        assert_ne!(a, c);
    }
}
