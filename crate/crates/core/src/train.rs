//! The full training lifecycle: Step 1 (autoencoder), the 2D embedding, the
//! codebook, Step 2 (MotionMap predictor) and codebook fine-tuning, with a
//! resumable checkpoint after every stage.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{codebook_loss, finetune, train_autoencoder, Autoencoder, EpochRecord, TrainOptions};
use crate::config::RunConfig;
use crate::data::{
    corpus_from_str, corpus_to_string, generate_synthetic_corpus, mine_multimodal_gt, split_by_sequence, window_corpus,
    MotionCorpus, MultimodalGtIndex, Sample, Split,
};
use crate::embedding::{fit_embedding, Embedding2D, HeatmapCell};
use crate::error::{Error, Result};
use crate::motionmap::{build_codebook, stamp_heatmap, train_heatmap_model, Codebook, Heatmap, HeatmapModel};
use crate::nn::Container;
use crate::pipeline::{evaluate, mine_for_protocol, Evaluation, MotionMapModel};

/// Stage names in execution order.
pub const STAGES: [&str; 5] = ["autoencoder", "embedding", "codebook", "motionmap", "finetune"];

/// Corpus, windows, split and mined ground truths for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub corpus: MotionCorpus,
    pub samples: Vec<Sample>,
    pub split: Split,
    /// Ground truths mined over every sample.
    pub index: MultimodalGtIndex,
}

impl Dataset {
    /// Windows and splits `corpus`; mines the index unless one is supplied.
    pub fn prepare(cfg: &RunConfig, corpus: MotionCorpus, index: Option<MultimodalGtIndex>) -> Result<Self> {
        let samples = window_corpus(&corpus, &cfg.window)?;
        if samples.is_empty() {
            return Err(Error::Empty("windowed corpus".into()));
        }
        let split = split_by_sequence(&samples, cfg.mining.test_fraction);
        let index = match index {
            Some(i) => {
                if i.len() != samples.len() || samples.iter().any(|s| i.get(s.id).is_none()) {
                    return Err(Error::InvalidConfig(
                        "ground-truth index does not match the windowed corpus".into(),
                    ));
                }
                i
            }
            None => mine_multimodal_gt(&samples, &corpus.topology, cfg.mining.threshold)?,
        };
        Ok(Self {
            corpus,
            samples,
            split,
            index,
        })
    }

    /// Generates the synthetic corpus described by `cfg`.
    pub fn synthetic(cfg: &RunConfig) -> Result<Self> {
        Self::prepare(cfg, generate_synthetic_corpus(&cfg.generator, cfg.seed)?, None)
    }

    pub fn train_samples(&self) -> Vec<Sample> {
        self.subset(&self.split.train)
    }

    pub fn test_samples(&self) -> Vec<Sample> {
        self.subset(&self.split.test)
    }

    fn subset(&self, ids: &[usize]) -> Vec<Sample> {
        ids.iter().map(|&i| self.samples[i].clone()).collect()
    }

    /// The index restricted to training queries and training members.
    pub fn train_index(&self) -> MultimodalGtIndex {
        let train: std::collections::BTreeSet<usize> = self.split.train.iter().copied().collect();
        self.index.restrict(|q| train.contains(&q), |m| train.contains(&m))
    }
}

/// Per-stage seeds, all derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub autoencoder_init: u64,
    pub autoencoder_train: u64,
    pub embedding: u64,
    pub motionmap_init: u64,
    pub motionmap_train: u64,
    pub finetune: u64,
}

impl StageSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            autoencoder_init: rng.next_u64(),
            autoencoder_train: rng.next_u64(),
            embedding: rng.next_u64(),
            motionmap_init: rng.next_u64(),
            motionmap_train: rng.next_u64(),
            finetune: rng.next_u64(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub autoencoder_loss: Vec<f64>,
    pub motionmap_loss: Vec<f64>,
    pub finetune_loss: Vec<f64>,
    /// Expected loss under codebook latents over the training set.
    pub codebook_loss_before_finetune: Option<f64>,
    pub codebook_loss_after_finetune: Option<f64>,
    pub ground_truth_draws: usize,
}

/// A training checkpoint: every finished stage's outputs in one container.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    container: Container,
}

impl Checkpoint {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut container = Container::new(cfg.training_hash());
        container.insert_json("config", cfg)?;
        container.insert_json("stages", &Vec::<String>::new())?;
        container.insert_json("seeds", &StageSeeds::derive(cfg.seed))?;
        container.insert_json("log", &TrainingLog::default())?;
        Ok(Self { container })
    }

    pub fn from_container(container: Container) -> Result<Self> {
        let ck = Self { container };
        let cfg = ck.config()?;
        if cfg.training_hash() != ck.container.spec_hash {
            return Err(Error::MalformedCheckpoint(
                "stored configuration does not match the checkpoint hash".into(),
            ));
        }
        let stages = ck.stages()?;
        if stages.len() > STAGES.len() || stages.iter().zip(STAGES).any(|(a, b)| a != b) {
            return Err(Error::MalformedCheckpoint(format!("unexpected stage list {stages:?}")));
        }
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.container.save(path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.container.to_bytes()
    }

    pub fn container(&self) -> &Container {
        &self.container
    }

    pub fn spec_hash(&self) -> [u8; 32] {
        self.container.spec_hash
    }

    pub fn config(&self) -> Result<RunConfig> {
        self.container.json("config")
    }

    pub fn stages(&self) -> Result<Vec<String>> {
        self.container.json("stages")
    }

    pub fn has_stage(&self, stage: &str) -> Result<bool> {
        Ok(self.stages()?.iter().any(|s| s == stage))
    }

    pub fn is_complete(&self) -> Result<bool> {
        Ok(self.stages()?.len() == STAGES.len())
    }

    /// The corpus the checkpoint was trained on.
    pub fn corpus(&self) -> Result<MotionCorpus> {
        let bytes = self.container.bytes("corpus")?;
        let text = std::str::from_utf8(bytes).map_err(|e| Error::MalformedCheckpoint(format!("corpus: {e}")))?;
        corpus_from_str(text)
    }

    /// Rebuilds the windows, split and ground truths used in training.
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::prepare(&self.config()?, self.corpus()?, None)
    }

    pub fn log(&self) -> Result<TrainingLog> {
        self.container.json("log")
    }

    pub fn seeds(&self) -> Result<StageSeeds> {
        self.container.json("seeds")
    }

    fn mark(&mut self, stage: &str) -> Result<()> {
        let mut stages = self.stages()?;
        stages.push(stage.to_string());
        self.container.insert_json("stages", &stages)
    }

    fn update_log(&mut self, f: impl FnOnce(&mut TrainingLog)) -> Result<()> {
        let mut log = self.log()?;
        f(&mut log);
        self.container.insert_json("log", &log)
    }

    fn require(&self, stage: &str) -> Result<()> {
        if self.has_stage(stage)? {
            Ok(())
        } else {
            Err(Error::MalformedCheckpoint(format!("stage `{stage}` has not run")))
        }
    }

    pub fn autoencoder(&self) -> Result<Autoencoder> {
        self.require("autoencoder")?;
        Autoencoder::from_params(self.config()?.autoencoder_dims(), self.container.params("ae")?)
    }

    pub fn embedding(&self) -> Result<Embedding2D> {
        self.require("embedding")?;
        self.container.json("embedding")
    }

    pub fn codebook(&self) -> Result<Codebook> {
        self.require("codebook")?;
        self.container.json("codebook")
    }

    pub fn future_cells(&self) -> Result<BTreeMap<usize, HeatmapCell>> {
        self.require("codebook")?;
        self.container.json("future_cells")
    }

    pub fn heatmap_model(&self) -> Result<HeatmapModel> {
        self.require("motionmap")?;
        HeatmapModel::from_params(self.config()?.heatmap_dims(), self.container.params("hm")?)
    }

    /// All components, ready for inference; requires a complete run.
    pub fn model(&self) -> Result<MotionMapModel> {
        if !self.is_complete()? {
            return Err(Error::MalformedCheckpoint(format!(
                "training incomplete: finished stages {:?}",
                self.stages()?
            )));
        }
        Ok(MotionMapModel {
            autoencoder: self.autoencoder()?,
            heatmap: self.heatmap_model()?,
            embedding: self.embedding()?,
            codebook: self.codebook()?,
            inference: self.config()?.inference,
            future_cells: self.future_cells()?,
        })
    }

    /// Same checkpoint with inference settings replaced (they are not hashed).
    pub fn with_inference(mut self, cfg: &RunConfig) -> Result<Self> {
        let mut stored = self.config()?;
        stored.inference = cfg.inference;
        stored.evaluate = cfg.evaluate;
        stored.serve = cfg.serve.clone();
        self.container.insert_json("config", &stored)?;
        Ok(self)
    }
}

/// Callbacks invoked while training.
pub struct TrainHooks<'a> {
    pub on_epoch: Box<dyn FnMut(EpochRecord) + 'a>,
    /// Called with the checkpoint after each stage finishes.
    pub on_stage: Box<dyn FnMut(&str, &Checkpoint) -> Result<()> + 'a>,
}

impl Default for TrainHooks<'_> {
    fn default() -> Self {
        Self {
            on_epoch: Box::new(|_| {}),
            on_stage: Box::new(|_, _| Ok(())),
        }
    }
}

/// Runs every stage that `resume` (if any) has not finished yet.
pub fn run_training(
    cfg: &RunConfig,
    data: &Dataset,
    resume: Option<Checkpoint>,
    hooks: &mut TrainHooks,
) -> Result<Checkpoint> {
    let mut ck = match resume {
        Some(ck) => {
            if ck.spec_hash() != cfg.training_hash() {
                return Err(Error::VersionMismatch(
                    "checkpoint was trained with a different configuration".into(),
                ));
            }
            ck
        }
        None => Checkpoint::new(cfg)?,
    };
    let corpus_text = corpus_to_string(&data.corpus)?.into_bytes();
    match ck.container.bytes("corpus") {
        Ok(stored) if stored != corpus_text.as_slice() => {
            return Err(Error::VersionMismatch("checkpoint was trained on a different corpus".into()));
        }
        Ok(_) => {}
        Err(_) => ck.container.insert_bytes("corpus", corpus_text),
    }
    let seeds = ck.seeds()?;
    let topo = &data.corpus.topology;
    let train = data.train_samples();
    let train_index = data.train_index();
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }

    if !ck.has_stage("autoencoder")? {
        let mut model = Autoencoder::new(cfg.autoencoder_dims(), seeds.autoencoder_init)?;
        let opts = TrainOptions {
            epochs: cfg.autoencoder.epochs,
            batch_size: cfg.autoencoder.batch_size,
            adam: cfg.adam(cfg.autoencoder.learning_rate),
            seed: seeds.autoencoder_train,
        };
        let report = train_autoencoder(&mut model, &train, &train_index, topo, &opts, &mut *hooks.on_epoch)?;
        ck.container.insert_params("ae", &model.params);
        ck.container.insert_adam("ae", &report.optimizer, &model.params)?;
        ck.update_log(|l| {
            l.autoencoder_loss = report.loss_curve.clone();
            l.ground_truth_draws = report.draws.len();
        })?;
        ck.mark("autoencoder")?;
        (hooks.on_stage)("autoencoder", &ck)?;
    }

    if !ck.has_stage("embedding")? {
        let model = ck.autoencoder()?;
        let latents = train
            .iter()
            .map(|s| model.encode_future(&s.y).map(|z| z.0))
            .collect::<Result<Vec<_>>>()?;
        let emb = fit_embedding(&latents, &cfg.embedding, seeds.embedding)?.scale_to_heatmap(cfg.motionmap.m)?;
        ck.container.insert_json("embedding", &emb)?;
        ck.mark("embedding")?;
        (hooks.on_stage)("embedding", &ck)?;
    }

    if !ck.has_stage("codebook")? {
        let emb = ck.embedding()?;
        let mut pairs = Vec::with_capacity(train.len());
        let mut cells = BTreeMap::new();
        for (i, s) in train.iter().enumerate() {
            let cell = emb.cell_of(i)?;
            cells.insert(s.id, cell);
            pairs.push((cell, emb.references[i].clone()));
        }
        let codebook = build_codebook(&pairs, cfg.motionmap.m, cfg.autoencoder.latent)?;
        ck.container.insert_json("codebook", &codebook)?;
        ck.container.insert_json("future_cells", &cells)?;
        ck.mark("codebook")?;
        (hooks.on_stage)("codebook", &ck)?;
    }

    if !ck.has_stage("motionmap")? {
        let cells = ck.future_cells()?;
        let targets = ground_truth_heatmaps(&train, &train_index, &cells, cfg)?;
        let examples: Vec<_> = train.iter().map(|s| &s.x).zip(targets.iter()).collect();
        let mut hm = HeatmapModel::new(cfg.heatmap_dims(), seeds.motionmap_init)?;
        let opts = TrainOptions {
            epochs: cfg.motionmap.epochs,
            batch_size: cfg.motionmap.batch_size,
            adam: cfg.adam(cfg.motionmap.learning_rate),
            seed: seeds.motionmap_train,
        };
        let report = train_heatmap_model(&mut hm, &examples, cfg.motionmap.pos_weight, &opts, &mut *hooks.on_epoch)?;
        ck.container.insert_params("hm", &hm.params);
        ck.container.insert_adam("hm", &report.optimizer, &hm.params)?;
        ck.update_log(|l| l.motionmap_loss = report.loss_curve.clone())?;
        ck.mark("motionmap")?;
        (hooks.on_stage)("motionmap", &ck)?;
    }

    if !ck.has_stage("finetune")? {
        let mut model = ck.autoencoder()?;
        let codebook = ck.codebook()?;
        let cells = ck.future_cells()?;
        let latent_for = |id: usize| -> Result<Vec<f64>> {
            let cell = cells.get(&id).ok_or(Error::UnknownSample(id))?;
            // Training futures populate their own cells, so this never falls back.
            let entry = codebook.get(*cell).ok_or(Error::NoPopulatedCell {
                row: cell.row,
                col: cell.col,
                radius: 0.0,
            })?;
            Ok(entry.mean.clone())
        };
        let before = codebook_loss(&model, &train, &train_index, topo, &latent_for)?;
        let opts = TrainOptions {
            epochs: cfg.finetune.epochs,
            batch_size: cfg.autoencoder.batch_size,
            adam: cfg.adam(cfg.autoencoder.learning_rate * cfg.finetune.lr_scale),
            seed: seeds.finetune,
        };
        let report = finetune(&mut model, &train, &train_index, topo, &opts, &latent_for, &mut *hooks.on_epoch)?;
        let after = codebook_loss(&model, &train, &train_index, topo, &latent_for)?;
        ck.container.insert_params("ae", &model.params);
        ck.container.insert_adam("ft", &report.optimizer, &model.params)?;
        ck.update_log(|l| {
            l.finetune_loss = report.loss_curve.clone();
            l.codebook_loss_before_finetune = Some(before);
            l.codebook_loss_after_finetune = Some(after);
        })?;
        ck.mark("finetune")?;
        (hooks.on_stage)("finetune", &ck)?;
    }
    Ok(ck)
}

/// Evaluates `model` on the held-out split with the protocol and budget in `cfg`.
pub fn evaluate_run(model: &MotionMapModel, data: &Dataset, cfg: &RunConfig) -> Result<Evaluation> {
    let topo = &data.corpus.topology;
    let index = mine_for_protocol(&data.samples, &data.split, topo, cfg.mining.threshold, cfg.evaluate.protocol)?;
    evaluate(model, &data.samples, &index, topo, cfg.evaluate.protocol, &cfg.evaluation())
}

/// Stamps, for every sample, the cells of all of its ground-truth futures.
pub fn ground_truth_heatmaps(
    samples: &[Sample],
    index: &MultimodalGtIndex,
    cells: &BTreeMap<usize, HeatmapCell>,
    cfg: &RunConfig,
) -> Result<Vec<Heatmap>> {
    samples
        .iter()
        .map(|s| {
            let members = index.get(s.id).ok_or(Error::UnknownSample(s.id))?;
            let gt_cells = members
                .iter()
                .map(|m| cells.get(m).copied().ok_or(Error::UnknownSample(*m)))
                .collect::<Result<Vec<_>>>()?;
            stamp_heatmap(&gt_cells, cfg.motionmap.sigma, cfg.motionmap.m)
        })
        .collect()
}
