//! Step one: the sequence autoencoder with a heteroscedastic uncertainty head.
//!
//! `E_X` and `E_Y` are single-layer GRU encoders whose final hidden states are
//! the latents `z_x` and `z_y`. A two-layer MLP fuses `z_x ++ z_y`; the fused
//! latent seeds an autoregressive GRU decoder that emits the whole window
//! (observation followed by future) and a two-layer MLP that predicts one
//! log-variance per joint per frame.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MultimodalGtIndex, Sample};
use crate::error::{Error, Result};
use crate::kinematics::{motion_transfer, PoseSequence, SkeletonTopology};
use crate::nn::loss::{heteroscedastic_nll, variance_from_raw};
use crate::nn::{Adam, AdamConfig, Dense, Gradients, GruCell, ParamId, ParameterStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedLatent(pub Vec<f64>);

/// Per-frame, per-joint predicted variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyGrid {
    pub frames: usize,
    pub joints: usize,
    pub variance: Vec<f64>,
}

impl UncertaintyGrid {
    pub fn constant(frames: usize, joints: usize, value: f64) -> Self {
        Self {
            frames,
            joints,
            variance: vec![value; frames * joints],
        }
    }

    pub fn at(&self, frame: usize, joint: usize) -> f64 {
        self.variance[frame * self.joints + joint]
    }

    /// Rows `start..end` as a new grid.
    pub fn frames_range(&self, start: usize, end: usize) -> Self {
        Self {
            frames: end - start,
            joints: self.joints,
            variance: self.variance[start * self.joints..end * self.joints].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderDims {
    pub obs_frames: usize,
    pub future_frames: usize,
    pub joints: usize,
    pub latent: usize,
    pub uncertainty_hidden: usize,
}

impl AutoencoderDims {
    pub fn total_frames(&self) -> usize {
        self.obs_frames + self.future_frames
    }

    fn pose_dim(&self) -> usize {
        3 * self.joints
    }
}

/// Parameter-name prefixes updated during codebook fine-tuning.
pub const FINETUNE_PREFIXES: [&str; 2] = ["fuse.", "dec."];

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub dims: AutoencoderDims,
    pub params: ParameterStore,
    enc_x: GruCell,
    enc_y: GruCell,
    fuse_in: Dense,
    fuse_out: Dense,
    dec_cell: GruCell,
    dec_head: Dense,
    unc_in: Dense,
    unc_out: Dense,
}

#[derive(Clone, Copy)]
enum Objective {
    Nll,
    Faithful,
}

/// Where the decoder gets its future latent from during a training pass.
#[derive(Clone, Copy)]
enum FutureLatent<'a> {
    Encode(&'a PoseSequence),
    Fixed(&'a [f64]),
}

impl Autoencoder {
    pub fn new(dims: AutoencoderDims, seed: u64) -> Result<Self> {
        if dims.obs_frames == 0 || dims.future_frames == 0 || dims.joints == 0 || dims.latent == 0 {
            return Err(Error::InvalidConfig("autoencoder dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new();
        let (pose, n) = (dims.pose_dim(), dims.latent);
        GruCell::new(&mut p, "enc_x.gru", pose, n, &mut rng)?;
        GruCell::new(&mut p, "enc_y.gru", pose, n, &mut rng)?;
        Dense::new(&mut p, "fuse.0", 2 * n, n, &mut rng)?;
        Dense::new(&mut p, "fuse.1", n, n, &mut rng)?;
        GruCell::new(&mut p, "dec.gru", pose, n, &mut rng)?;
        Dense::new(&mut p, "dec.head", n, pose, &mut rng)?;
        Dense::new(&mut p, "unc.0", n, dims.uncertainty_hidden, &mut rng)?;
        Dense::new(
            &mut p,
            "unc.1",
            dims.uncertainty_hidden,
            dims.total_frames() * dims.joints,
            &mut rng,
        )?;
        Self::from_params(dims, p)
    }

    pub fn from_params(dims: AutoencoderDims, params: ParameterStore) -> Result<Self> {
        let model = Self {
            enc_x: GruCell::bind(&params, "enc_x.gru")?,
            enc_y: GruCell::bind(&params, "enc_y.gru")?,
            fuse_in: Dense::bind(&params, "fuse.0")?,
            fuse_out: Dense::bind(&params, "fuse.1")?,
            dec_cell: GruCell::bind(&params, "dec.gru")?,
            dec_head: Dense::bind(&params, "dec.head")?,
            unc_in: Dense::bind(&params, "unc.0")?,
            unc_out: Dense::bind(&params, "unc.1")?,
            dims,
            params,
        };
        let (pose, n) = (dims.pose_dim(), dims.latent);
        let consistent = model.enc_x.input == pose
            && model.enc_x.hidden == n
            && model.enc_y.input == pose
            && model.enc_y.hidden == n
            && model.fuse_in.input == 2 * n
            && model.fuse_out.output == n
            && model.dec_cell.hidden == n
            && model.dec_head.output == pose
            && model.unc_in.output == dims.uncertainty_hidden
            && model.unc_out.output == dims.total_frames() * dims.joints;
        if !consistent {
            return Err(Error::MalformedCheckpoint(
                "autoencoder parameters disagree with its dims".into(),
            ));
        }
        Ok(model)
    }

    fn check_seq(&self, seq: &PoseSequence, frames: usize, what: &str) -> Result<()> {
        if seq.joints() != self.dims.joints {
            return Err(Error::TopologyMismatch {
                expected: self.dims.joints,
                actual: seq.joints(),
            });
        }
        if seq.num_frames() != frames {
            return Err(Error::shape(what, format!("{frames} frames"), seq.num_frames()));
        }
        if !seq.is_finite() {
            return Err(Error::NonFinite(what.into()));
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64], what: &str) -> Result<()> {
        if z.len() != self.dims.latent {
            return Err(Error::shape(what, self.dims.latent, z.len()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.into()));
        }
        Ok(())
    }

    fn encode_on(cell: &GruCell, tape: &mut Tape, seq: &PoseSequence) -> Result<Var> {
        let inputs: Vec<Var> = seq
            .frames()
            .map(|f| tape.constant(f.iter().flatten().copied().collect()))
            .collect();
        cell.encode(tape, &inputs)
    }

    fn fuse_on(&self, tape: &mut Tape, zx: Var, zy: Var) -> Result<Var> {
        let cat = tape.concat(&[zx, zy]);
        let h = self.fuse_in.forward(tape, cat)?;
        let h = tape.tanh(h);
        self.fuse_out.forward(tape, h)
    }

    /// Unrolls the decoder; returns the concatenated poses of every frame.
    fn decode_on(&self, tape: &mut Tape, zf: Var) -> Result<Var> {
        let mut h = zf;
        let mut prev = tape.constant(vec![0.0; self.dims.pose_dim()]);
        let mut poses = Vec::with_capacity(self.dims.total_frames());
        for _ in 0..self.dims.total_frames() {
            h = self.dec_cell.step(tape, prev, h)?;
            prev = self.dec_head.forward(tape, h)?;
            poses.push(prev);
        }
        Ok(tape.concat(&poses))
    }

    fn log_variance_on(&self, tape: &mut Tape, zf: Var) -> Result<Var> {
        let h = self.unc_in.forward(tape, zf)?;
        let h = tape.elu(h);
        self.unc_out.forward(tape, h)
    }

    pub fn encode_observation(&self, x: &PoseSequence) -> Result<LatentVector> {
        self.check_seq(x, self.dims.obs_frames, "observation")?;
        let mut tape = Tape::new(&self.params);
        let z = Self::encode_on(&self.enc_x, &mut tape, x)?;
        Ok(LatentVector(tape.value(z).to_vec()))
    }

    pub fn encode_future(&self, y: &PoseSequence) -> Result<LatentVector> {
        self.check_seq(y, self.dims.future_frames, "future")?;
        let mut tape = Tape::new(&self.params);
        let z = Self::encode_on(&self.enc_y, &mut tape, y)?;
        Ok(LatentVector(tape.value(z).to_vec()))
    }

    pub fn fuse(&self, zx: &LatentVector, zy: &LatentVector) -> Result<FusedLatent> {
        self.check_latent(&zx.0, "z_x")?;
        self.check_latent(&zy.0, "z_y")?;
        let mut tape = Tape::new(&self.params);
        let (a, b) = (tape.constant(zx.0.clone()), tape.constant(zy.0.clone()));
        let f = self.fuse_on(&mut tape, a, b)?;
        Ok(FusedLatent(tape.value(f).to_vec()))
    }

    /// Decodes the full window (`obs_frames + future_frames` pelvis-centered poses).
    pub fn decode(&self, zf: &FusedLatent) -> Result<PoseSequence> {
        self.check_latent(&zf.0, "fused latent")?;
        let mut tape = Tape::new(&self.params);
        let z = tape.constant(zf.0.clone());
        let out = self.decode_on(&mut tape, z)?;
        PoseSequence::from_flat(self.dims.joints, 1.0, tape.value(out))
    }

    pub fn predict_uncertainty(&self, zf: &FusedLatent) -> Result<UncertaintyGrid> {
        self.check_latent(&zf.0, "fused latent")?;
        let mut tape = Tape::new(&self.params);
        let z = tape.constant(zf.0.clone());
        let raw = self.log_variance_on(&mut tape, z)?;
        Ok(UncertaintyGrid {
            frames: self.dims.total_frames(),
            joints: self.dims.joints,
            variance: tape.value(raw).iter().map(|&r| variance_from_raw(r)).collect(),
        })
    }

    /// Builds the objective for one window on `tape`. With `Objective::Nll`
    /// the result is the plain negative log-likelihood. With
    /// `Objective::Faithful` the poses receive the squared-error gradient
    /// while the uncertainty head fits the likelihood on detached inputs;
    /// the returned node then carries the likelihood value in `.0` and the
    /// surrogate to differentiate in `.1`.
    fn window_loss(
        &self,
        tape: &mut Tape,
        x: &PoseSequence,
        future: FutureLatent,
        target: &PoseSequence,
        objective: Objective,
    ) -> Result<(Var, Var)> {
        let zx = Self::encode_on(&self.enc_x, tape, x)?;
        let zy = match future {
            FutureLatent::Encode(y) => Self::encode_on(&self.enc_y, tape, y)?,
            FutureLatent::Fixed(z) => tape.constant(z.to_vec()),
        };
        let zf = self.fuse_on(tape, zx, zy)?;
        let pred = self.decode_on(tape, zf)?;
        let mut full = x.to_flat();
        full.extend(target.positions().iter().flatten());
        match objective {
            Objective::Nll => {
                let raw = self.log_variance_on(tape, zf)?;
                let nll = tape.nll(pred, raw, full);
                Ok((nll, nll))
            }
            Objective::Faithful => {
                let zf_detached = tape.constant(tape.value(zf).to_vec());
                let raw = self.log_variance_on(tape, zf_detached)?;
                let unit = tape.constant(vec![0.0; self.dims.total_frames() * self.dims.joints]);
                let mse = tape.nll(pred, unit, full.clone());
                let pred_detached = tape.constant(tape.value(pred).to_vec());
                let nll = tape.nll(pred_detached, raw, full);
                let surrogate = tape.add(mse, nll);
                Ok((nll, surrogate))
            }
        }
    }

    fn window_loss_and_grads(
        &self,
        x: &PoseSequence,
        future: FutureLatent,
        target: &PoseSequence,
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(&self.params);
        let (nll, surrogate) = self.window_loss(&mut tape, x, future, target, Objective::Faithful)?;
        let value = tape.value(nll)[0];
        let grads = tape.backward_scalar(surrogate)?.params;
        Ok((value, grads))
    }

    /// Mean per-joint squared error of the decoded window, with unit variance.
    fn window_mse(&self, x: &PoseSequence, future: FutureLatent, target: &PoseSequence) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let zx = Self::encode_on(&self.enc_x, &mut tape, x)?;
        let zy = match future {
            FutureLatent::Encode(y) => Self::encode_on(&self.enc_y, &mut tape, y)?,
            FutureLatent::Fixed(z) => tape.constant(z.to_vec()),
        };
        let zf = self.fuse_on(&mut tape, zx, zy)?;
        let pred = self.decode_on(&mut tape, zf)?;
        let mut full = x.to_flat();
        full.extend(target.positions().iter().flatten());
        let ones = vec![1.0; self.dims.total_frames() * self.dims.joints];
        Ok(heteroscedastic_nll(tape.value(pred), &full, &ones))
    }

    fn trainable(&self, prefixes: Option<&[&str]>) -> Vec<ParamId> {
        match prefixes {
            Some(p) => self.params.ids_with_prefix(p),
            None => (0..self.params.len()).collect(),
        }
    }
}

/// Mean over frames and joints of `err / var + ln var` with `err` the squared
/// 3D distance of each joint.
pub fn nll_loss(pred: &PoseSequence, target: &PoseSequence, variance: &UncertaintyGrid) -> Result<f64> {
    if pred.joints() != target.joints() || pred.num_frames() != target.num_frames() {
        return Err(Error::shape(
            "nll prediction/target",
            format!("{}x{}", target.num_frames(), target.joints()),
            format!("{}x{}", pred.num_frames(), pred.joints()),
        ));
    }
    if variance.frames != pred.num_frames() || variance.joints != pred.joints() {
        return Err(Error::shape(
            "nll variance",
            format!("{}x{}", pred.num_frames(), pred.joints()),
            format!("{}x{}", variance.frames, variance.joints),
        ));
    }
    if variance.variance.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidConfig("variance must be positive".into()));
    }
    Ok(heteroscedastic_nll(&pred.to_flat(), &target.to_flat(), &variance.variance))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Which ground truth a sample trained against in a given epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    pub epoch: usize,
    pub sample: usize,
    pub ground_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub draws: Vec<Draw>,
    pub optimizer: Adam,
}

struct Job<'a> {
    sample: &'a Sample,
    target: PoseSequence,
    fixed: Option<Vec<f64>>,
}

fn sample_map(samples: &[Sample]) -> HashMap<usize, &Sample> {
    samples.iter().map(|s| (s.id, s)).collect()
}

fn members<'a>(index: &'a MultimodalGtIndex, id: usize) -> Result<&'a [usize]> {
    index
        .get(id)
        .filter(|m| !m.is_empty())
        .ok_or(Error::UnknownSample(id))
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut Autoencoder,
    samples: &[Sample],
    index: &MultimodalGtIndex,
    topo: &SkeletonTopology,
    opts: &TrainOptions,
    stage: &str,
    trainable: &[ParamId],
    latent_for: Option<&(dyn Fn(usize) -> Result<Vec<f64>> + Sync)>,
    progress: &mut dyn FnMut(EpochRecord),
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let by_id = sample_map(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.adam, &model.params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut draws = Vec::new();
    let batch = opts.batch_size.max(1);

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut jobs = Vec::with_capacity(samples.len());
        for &k in &order {
            let s = &samples[k];
            let m = members(index, s.id)?;
            let gt = m[rng.random_range(0..m.len())];
            draws.push(Draw {
                epoch,
                sample: s.id,
                ground_truth: gt,
            });
            let other = by_id.get(&gt).ok_or(Error::UnknownSample(gt))?;
            let target = motion_transfer(&s.x, &other.y, topo)?;
            let fixed = latent_for.map(|f| f(gt)).transpose()?;
            jobs.push(Job {
                sample: s,
                target,
                fixed,
            });
        }

        let mut epoch_loss = 0.0;
        for chunk in jobs.chunks(batch) {
            let model_ref = &*model;
            let results: Vec<Result<(f64, Gradients)>> = chunk
                .par_iter()
                .map(|job| {
                    let future = match &job.fixed {
                        Some(z) => FutureLatent::Fixed(z),
                        None => FutureLatent::Encode(&job.target),
                    };
                    model_ref.window_loss_and_grads(&job.sample.x, future, &job.target)
                })
                .collect();
            // Reduce in job order so the sum does not depend on scheduling.
            let mut total = Gradients::zeros_like(&model.params);
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        stage: stage.into(),
                        epoch,
                        loss,
                    });
                }
                epoch_loss += loss;
                total.add_assign(&g);
            }
            total.scale(1.0 / chunk.len() as f64);
            adam.step(&mut model.params, &total, trainable)?;
        }
        let mean = epoch_loss / samples.len() as f64;
        curve.push(mean);
        progress(EpochRecord {
            stage: stage.into(),
            epoch,
            loss: mean,
        });
    }
    Ok(TrainReport {
        loss_curve: curve,
        draws,
        optimizer: adam,
    })
}

/// Trains every component on windows `X ++ Y^i`, drawing one ground truth
/// `Y^i` per sample per epoch from its multimodal set and transferring it onto
/// the sample's skeleton.
pub fn train_autoencoder(
    model: &mut Autoencoder,
    samples: &[Sample],
    index: &MultimodalGtIndex,
    topo: &SkeletonTopology,
    opts: &TrainOptions,
    progress: &mut dyn FnMut(EpochRecord),
) -> Result<TrainReport> {
    let trainable = model.trainable(None);
    run_epochs(model, samples, index, topo, opts, "autoencoder", &trainable, None, progress)
}

/// Same as training, except that `z_y` is replaced by `latent_for(ground_truth)`
/// (the codebook mean at the ground truth's cell) and only the fusion map and
/// the decoder are updated.
pub fn finetune(
    model: &mut Autoencoder,
    samples: &[Sample],
    index: &MultimodalGtIndex,
    topo: &SkeletonTopology,
    opts: &TrainOptions,
    latent_for: &(dyn Fn(usize) -> Result<Vec<f64>> + Sync),
    progress: &mut dyn FnMut(EpochRecord),
) -> Result<TrainReport> {
    let trainable = model.trainable(Some(&FINETUNE_PREFIXES));
    run_epochs(
        model,
        samples,
        index,
        topo,
        opts,
        "finetune",
        &trainable,
        Some(latent_for),
        progress,
    )
}

/// Expected training objective under codebook latents: for every sample, the
/// mean loss over all of its ground truths with `z_y = latent_for(gt)`.
pub fn codebook_loss(
    model: &Autoencoder,
    samples: &[Sample],
    index: &MultimodalGtIndex,
    topo: &SkeletonTopology,
    latent_for: &(dyn Fn(usize) -> Result<Vec<f64>> + Sync),
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let by_id = sample_map(samples);
    let per_sample: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let m = members(index, s.id)?;
            let mut total = 0.0;
            for &gt in m {
                let other = by_id.get(&gt).ok_or(Error::UnknownSample(gt))?;
                let target = motion_transfer(&s.x, &other.y, topo)?;
                let z = latent_for(gt)?;
                let mut tape = Tape::new(&model.params);
                let (loss, _) = model.window_loss(&mut tape, &s.x, FutureLatent::Fixed(&z), &target, Objective::Nll)?;
                total += tape.value(loss)[0];
            }
            Ok(total / m.len() as f64)
        })
        .collect();
    let mut sum = 0.0;
    for r in per_sample {
        sum += r?;
    }
    Ok(sum / samples.len() as f64)
}

/// Mean per-joint squared reconstruction error of each sample against its own
/// future, using the encoded `z_y`.
pub fn reconstruction_mse(model: &Autoencoder, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += model.window_mse(&s.x, FutureLatent::Encode(&s.y), &s.y)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input, check_params};
    use std::collections::BTreeMap;

    fn dims() -> AutoencoderDims {
        AutoencoderDims {
            obs_frames: 3,
            future_frames: 4,
            joints: 17,
            latent: 8,
            uncertainty_hidden: 6,
        }
    }

    fn toy_sample(id: usize, phase: f64) -> Sample {
        let topo = SkeletonTopology::human17();
        let mk = |frames: usize, t0: usize| {
            let data = (0..frames * 17)
                .map(|i| {
                    let (f, j) = (i / 17 + t0, i % 17);
                    if j == 0 {
                        [0.0; 3]
                    } else {
                        let a = 0.3 * ((f as f64) * 0.4 + phase + j as f64).sin();
                        [0.05 * j as f64, a, 0.1 + 0.02 * j as f64]
                    }
                })
                .collect();
            PoseSequence::new(topo.joint_count(), 25.0, data).unwrap()
        };
        Sample {
            id,
            x: mk(3, 0),
            y: mk(4, 3),
            action_label: "toy".into(),
            source_sequence: id,
            start: 0,
        }
    }

    fn singleton_index(samples: &[Sample]) -> MultimodalGtIndex {
        let m: BTreeMap<usize, Vec<usize>> = samples.iter().map(|s| (s.id, vec![s.id])).collect();
        MultimodalGtIndex::from_parts(0.0, m)
    }

    #[test]
    fn encoding_is_deterministic_and_checks_shapes() {
        let model = Autoencoder::new(dims(), 1).unwrap();
        let s = toy_sample(0, 0.0);
        assert_eq!(
            model.encode_observation(&s.x).unwrap(),
            model.encode_observation(&s.x).unwrap()
        );
        assert!(model.encode_observation(&s.y).is_err());
        assert!(model.encode_future(&s.x).is_err());
        assert_eq!(model.encode_future(&s.y).unwrap().0.len(), 8);
    }

    #[test]
    fn decode_length_and_uncertainty_bounds() {
        let model = Autoencoder::new(dims(), 2).unwrap();
        let z = FusedLatent(vec![0.3; 8]);
        let seq = model.decode(&z).unwrap();
        assert_eq!(seq.num_frames(), 7);
        assert_eq!(seq, model.decode(&z).unwrap());
        let big = FusedLatent(vec![1e3; 8]);
        assert_eq!(model.decode(&big).unwrap().num_frames(), 7);
        let u = model.predict_uncertainty(&z).unwrap();
        assert_eq!(u.variance.len(), 7 * 17);
        assert!(u.variance.iter().all(|&v| (1e-6..=1e6).contains(&v)));
        assert!(model.decode(&FusedLatent(vec![f64::NAN; 8])).is_err());
    }

    #[test]
    fn zero_uncertainty_head_gives_unit_variance() {
        let mut model = Autoencoder::new(dims(), 3).unwrap();
        for name in ["unc.1.w", "unc.1.b"] {
            let id = model.params.id(name).unwrap();
            model.params.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let u = model.predict_uncertainty(&FusedLatent(vec![0.5; 8])).unwrap();
        assert!(u.variance.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_fusion_weights_give_zero_output() {
        let mut model = Autoencoder::new(dims(), 4).unwrap();
        for id in model.params.ids_with_prefix(&["fuse."]) {
            model.params.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let f = model
            .fuse(&LatentVector(vec![1.0; 8]), &LatentVector(vec![-2.0; 8]))
            .unwrap();
        assert!(f.0.iter().all(|&v| v == 0.0));
        assert!(model.fuse(&LatentVector(vec![1.0; 7]), &LatentVector(vec![1.0; 8])).is_err());
    }

    #[test]
    fn fusion_is_ordered() {
        let model = Autoencoder::new(dims(), 5).unwrap();
        let a = LatentVector((0..8).map(|i| i as f64 * 0.1).collect());
        let b = LatentVector((0..8).map(|i| -(i as f64) * 0.2).collect());
        assert_ne!(model.fuse(&a, &b).unwrap(), model.fuse(&b, &a).unwrap());
    }

    #[test]
    fn fusion_input_gradients_match_finite_differences() {
        let model = Autoencoder::new(dims(), 6).unwrap();
        let z0: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        for out in [0usize, 3, 7] {
            let run = |z: &[f64]| -> (f64, Vec<f64>) {
                let mut tape = Tape::new(&model.params);
                let zx = tape.input(z[..8].to_vec()).unwrap();
                let zy = tape.input(z[8..].to_vec()).unwrap();
                let f = model.fuse_on(&mut tape, zx, zy).unwrap();
                let mut seed = vec![0.0; 8];
                seed[out] = 1.0;
                let g = tape.backward(f, &seed).unwrap();
                let mut grad = g.wrt(zx).to_vec();
                grad.extend_from_slice(g.wrt(zy));
                (tape.value(f)[out], grad)
            };
            let (_, analytic) = run(&z0);
            let report = check_input(&z0, &analytic, |z| run(z).0, 1e-5);
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn window_loss_gradients_match_finite_differences() {
        let mut model = Autoencoder::new(dims(), 7).unwrap();
        let s = toy_sample(0, 0.3);
        let loss_of = |m: &Autoencoder| -> (f64, Gradients) {
            let mut tape = Tape::new(&m.params);
            let (l, _) = m.window_loss(&mut tape, &s.x, FutureLatent::Encode(&s.y), &s.y, Objective::Nll).unwrap();
            (tape.value(l)[0], tape.backward_scalar(l).unwrap().params)
        };
        let (_, analytic) = loss_of(&model);
        let dims = model.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = check_params(
            &mut model.params,
            &analytic,
            |p| loss_of(&Autoencoder::from_params(dims, p.clone()).unwrap()).0,
            1e-5,
            8,
            &mut rng,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn nll_loss_reference_values() {
        let s = toy_sample(0, 0.0);
        let ones = UncertaintyGrid::constant(4, 17, 1.0);
        assert_eq!(nll_loss(&s.y, &s.y, &ones).unwrap(), 0.0);
        let mut shifted = s.y.clone();
        for f in 0..4 {
            shifted.frame_mut(f)[3][1] += 0.5;
        }
        let l = nll_loss(&shifted, &s.y, &ones).unwrap();
        assert!((l - 0.25 / 17.0).abs() < 1e-15);
        assert!(nll_loss(&s.x, &s.y, &ones).is_err());
    }

    #[test]
    fn training_is_deterministic_and_overfits() {
        let samples = vec![toy_sample(0, 0.0)];
        let index = singleton_index(&samples);
        let topo = SkeletonTopology::human17();
        let opts = TrainOptions {
            epochs: 200,
            batch_size: 1,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            seed: 3,
        };
        let run = || {
            let mut model = Autoencoder::new(dims(), 11).unwrap();
            let first = reconstruction_mse(&model, &samples).unwrap();
            let report =
                train_autoencoder(&mut model, &samples, &index, &topo, &opts, &mut |_| {}).unwrap();
            (first, reconstruction_mse(&model, &samples).unwrap(), report)
        };
        let (before, after, a) = run();
        assert!(after * 10.0 <= before, "{before} -> {after}");
        let (_, _, b) = run();
        assert_eq!(a.loss_curve, b.loss_curve);
    }

    #[test]
    fn both_ground_truths_get_drawn() {
        let samples = vec![toy_sample(0, 0.0), toy_sample(1, 1.0)];
        let mut m = BTreeMap::new();
        m.insert(0, vec![0, 1]);
        m.insert(1, vec![1]);
        let index = MultimodalGtIndex::from_parts(1.0, m);
        let mut model = Autoencoder::new(dims(), 1).unwrap();
        let opts = TrainOptions {
            epochs: 100,
            ..TrainOptions::default()
        };
        let report = train_autoencoder(
            &mut model,
            &samples,
            &index,
            &SkeletonTopology::human17(),
            &opts,
            &mut |_| {},
        )
        .unwrap();
        let drawn: std::collections::BTreeSet<usize> = report
            .draws
            .iter()
            .filter(|d| d.sample == 0)
            .map(|d| d.ground_truth)
            .collect();
        assert_eq!(drawn.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn finetune_freezes_encoders_and_uncertainty() {
        let samples = vec![toy_sample(0, 0.0), toy_sample(1, 0.7)];
        let index = singleton_index(&samples);
        let topo = SkeletonTopology::human17();
        let mut model = Autoencoder::new(dims(), 5).unwrap();
        let before = model.clone();
        let latents: HashMap<usize, Vec<f64>> = samples
            .iter()
            .map(|s| (s.id, before.encode_future(&s.y).unwrap().0))
            .collect();
        let latent_for = |id: usize| Ok(latents[&id].clone());
        let l0 = codebook_loss(&model, &samples, &index, &topo, &latent_for).unwrap();
        let opts = TrainOptions {
            epochs: 20,
            batch_size: 2,
            ..TrainOptions::default()
        };
        finetune(&mut model, &samples, &index, &topo, &opts, &latent_for, &mut |_| {}).unwrap();
        for (id, p) in model.params.iter() {
            let frozen = !FINETUNE_PREFIXES.iter().any(|pre| p.name.starts_with(pre));
            if frozen {
                assert_eq!(p.data, before.params.get(id).data, "{} moved", p.name);
            }
        }
        let l1 = codebook_loss(&model, &samples, &index, &topo, &latent_for).unwrap();
        assert!(l1 < l0, "{l0} -> {l1}");
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let mut model = Autoencoder::new(dims(), 1).unwrap();
        let index = MultimodalGtIndex::from_parts(0.0, BTreeMap::new());
        let r = train_autoencoder(
            &mut model,
            &[],
            &index,
            &SkeletonTopology::human17(),
            &TrainOptions::default(),
            &mut |_| {},
        );
        assert!(matches!(r, Err(Error::Empty(_))));
    }
}
