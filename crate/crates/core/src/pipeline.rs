//! Deterministic multimodal inference, confidence ranking with a fixed
//! prediction budget, and the evaluation metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, FusedLatent, LatentVector, UncertaintyGrid};
use crate::data::{mining::mine_against, MultimodalGtIndex, Sample, Split};
use crate::embedding::{quantize, Embedding2D, HeatmapCell};
use crate::error::{Error, Result};
use crate::kinematics::{motion_transfer, PoseSequence, SkeletonTopology};
use crate::motionmap::{
    extract_maxima, predict_motionmap, stamp_heatmap, Codebook, Heatmap, HeatmapModel, MaximaConfig, Mode,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub maxima: MaximaConfig,
    /// Euclidean radius, in cells, of the codebook fallback search.
    pub fallback_radius: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            maxima: MaximaConfig::default(),
            fallback_radius: 5.0,
        }
    }
}

/// Every trained component needed at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMapModel {
    pub autoencoder: Autoencoder,
    pub heatmap: HeatmapModel,
    pub embedding: Embedding2D,
    pub codebook: Codebook,
    pub inference: InferenceConfig,
    /// Cell of every training future, keyed by sample id.
    pub future_cells: BTreeMap<usize, HeatmapCell>,
}

/// The decoded window for one chosen heatmap cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellForecast {
    /// Populated codebook cell actually decoded (differs from the request on fallback).
    pub used_cell: HeatmapCell,
    pub forecast: PoseSequence,
    pub reconstruction: PoseSequence,
    pub uncertainty: UncertaintyGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedForecast {
    pub rank: usize,
    pub mode: Mode,
    /// False for modes added by budget expansion rather than maxima extraction.
    pub is_maximum: bool,
    pub used_cell: HeatmapCell,
    pub forecast: PoseSequence,
    pub reconstruction: PoseSequence,
    pub uncertainty: UncertaintyGrid,
}

impl MotionMapModel {
    pub fn obs_frames(&self) -> usize {
        self.autoencoder.dims.obs_frames
    }

    pub fn future_frames(&self) -> usize {
        self.autoencoder.dims.future_frames
    }

    pub fn grid_size(&self) -> usize {
        self.codebook.m
    }

    pub fn motionmap(&self, x: &PoseSequence) -> Result<Heatmap> {
        predict_motionmap(&self.heatmap, x)
    }

    /// Cell of a future: its fitted cell if it was a training future,
    /// otherwise the out-of-sample transform of its encoding.
    pub fn future_cell(&self, id: Option<usize>, y: &PoseSequence) -> Result<HeatmapCell> {
        if let Some(c) = id.and_then(|i| self.future_cells.get(&i)) {
            return Ok(*c);
        }
        let z = self.autoencoder.encode_future(y)?;
        Ok(quantize(self.embedding.transform_new(&z.0)?, self.grid_size()))
    }

    fn decode_latent(&self, x: &PoseSequence, zx: &LatentVector, zy: &[f64]) -> Result<(PoseSequence, PoseSequence, UncertaintyGrid)> {
        let zf: FusedLatent = self.autoencoder.fuse(zx, &LatentVector(zy.to_vec()))?;
        let window = self.autoencoder.decode(&zf)?;
        let window = PoseSequence::new(window.joints(), x.fps(), window.positions().to_vec())?;
        let to = self.obs_frames();
        let total = window.num_frames();
        Ok((
            window.slice(to, total)?,
            window.slice(0, to)?,
            self.autoencoder.predict_uncertainty(&zf)?,
        ))
    }

    /// Decodes the forecast for an arbitrary cell via codebook lookup with fallback.
    pub fn forecast_at_cell(&self, x: &PoseSequence, cell: HeatmapCell) -> Result<CellForecast> {
        let zx = self.autoencoder.encode_observation(x)?;
        self.forecast_at_cell_with(x, &zx, cell)
    }

    fn forecast_at_cell_with(&self, x: &PoseSequence, zx: &LatentVector, cell: HeatmapCell) -> Result<CellForecast> {
        let hit = self.codebook.lookup(cell, self.inference.fallback_radius)?;
        let (forecast, reconstruction, uncertainty) = self.decode_latent(x, zx, hit.latent)?;
        Ok(CellForecast {
            used_cell: hit.cell,
            forecast,
            reconstruction,
            uncertainty,
        })
    }

    /// Chooses up to `budget` cells to decode: heatmap maxima first, then, if
    /// fewer than `budget` resolve to distinct codebook cells, the highest
    /// remaining cells outside every accepted cell's suppression radius, then
    /// any remaining cell. Each pick must resolve to a codebook cell not used
    /// yet. Picks are finally ordered by confidence.
    pub fn select_modes(&self, hm: &Heatmap, budget: usize) -> Vec<(Mode, bool, HeatmapCell)> {
        let radius = self.inference.fallback_radius;
        let nms = self.inference.maxima.nms_radius;
        let mut picks: Vec<(Mode, bool, HeatmapCell)> = Vec::new();
        let mut used: Vec<HeatmapCell> = Vec::new();
        let mut try_add = |mode: Mode, is_max: bool, picks: &mut Vec<(Mode, bool, HeatmapCell)>| {
            if let Ok(hit) = self.codebook.lookup(mode.cell, radius) {
                if !used.contains(&hit.cell) {
                    used.push(hit.cell);
                    picks.push((mode, is_max, hit.cell));
                }
            }
        };
        let maxima = MaximaConfig {
            max_modes: None,
            ..self.inference.maxima
        };
        for mode in extract_maxima(hm, &maxima) {
            if picks.len() >= budget {
                break;
            }
            try_add(mode, true, &mut picks);
        }
        if picks.len() < budget {
            let ranked = hm.cells_by_value();
            for cell in &ranked {
                if picks.len() >= budget {
                    break;
                }
                if picks.iter().all(|(m, _, _)| m.cell.chebyshev(cell) > nms) {
                    let mode = Mode {
                        cell: *cell,
                        confidence: hm.at(*cell),
                    };
                    try_add(mode, false, &mut picks);
                }
            }
            for cell in &ranked {
                if picks.len() >= budget {
                    break;
                }
                if picks.iter().all(|(m, _, _)| m.cell != *cell) {
                    let mode = Mode {
                        cell: *cell,
                        confidence: hm.at(*cell),
                    };
                    try_add(mode, false, &mut picks);
                }
            }
        }
        // Stable: equal confidences keep selection order.
        picks.sort_by(|a, b| b.0.confidence.total_cmp(&a.0.confidence));
        picks
    }

    /// Ranked multimodal forecasts for observation `x` with exactly `budget`
    /// outputs whenever the codebook allows it.
    pub fn forecast(&self, x: &PoseSequence, budget: usize) -> Result<Vec<RankedForecast>> {
        if budget == 0 {
            return Err(Error::InvalidConfig("prediction budget must be at least 1".into()));
        }
        let hm = self.motionmap(x)?;
        let zx = self.autoencoder.encode_observation(x)?;
        let picks = self.select_modes(&hm, budget);
        if picks.is_empty() {
            return Err(Error::NoConfidentFuture);
        }
        picks
            .into_par_iter()
            .enumerate()
            .map(|(i, (mode, is_maximum, cell))| {
                let f = self.forecast_at_cell_with(x, &zx, cell)?;
                Ok(RankedForecast {
                    rank: i + 1,
                    mode,
                    is_maximum,
                    used_cell: f.used_cell,
                    forecast: f.forecast,
                    reconstruction: f.reconstruction,
                    uncertainty: f.uncertainty,
                })
            })
            .collect()
    }
}

/// Repeats the last observed pose `future_frames` times.
pub fn zero_velocity(x: &PoseSequence, future_frames: usize) -> Result<PoseSequence> {
    if x.num_frames() == 0 {
        return Err(Error::Empty("observation".into()));
    }
    let last = x.last_frame().to_vec();
    PoseSequence::from_frames(vec![last; future_frames], x.fps())
}

/// Euclidean norm over all coordinates of one frame.
pub fn frame_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn check_pair(pred: &PoseSequence, gt: &PoseSequence) -> Result<()> {
    if pred.num_frames() != gt.num_frames() || pred.joints() != gt.joints() {
        return Err(Error::shape(
            "prediction",
            format!("{}x{}", gt.num_frames(), gt.joints()),
            format!("{}x{}", pred.num_frames(), pred.joints()),
        ));
    }
    Ok(())
}

fn mean_displacement(pred: &PoseSequence, gt: &PoseSequence) -> f64 {
    let total: f64 = pred.frames().zip(gt.frames()).map(|(a, b)| frame_distance(a, b)).sum();
    total / gt.num_frames() as f64
}

fn final_displacement(pred: &PoseSequence, gt: &PoseSequence) -> f64 {
    frame_distance(pred.last_frame(), gt.last_frame())
}

fn min_over(preds: &[PoseSequence], gt: &PoseSequence, f: fn(&PoseSequence, &PoseSequence) -> f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions".into()));
    }
    let mut best = f64::INFINITY;
    for p in preds {
        check_pair(p, gt)?;
        best = best.min(f(p, gt));
    }
    Ok(best)
}

/// Minimum over predictions of the mean per-frame pose distance.
pub fn ade(preds: &[PoseSequence], gt: &PoseSequence) -> Result<f64> {
    min_over(preds, gt, mean_displacement)
}

/// Minimum over predictions of the final-frame pose distance.
pub fn fde(preds: &[PoseSequence], gt: &PoseSequence) -> Result<f64> {
    min_over(preds, gt, final_displacement)
}

fn mean_over_gts(preds: &[PoseSequence], gts: &[PoseSequence], f: fn(&[PoseSequence], &PoseSequence) -> Result<f64>) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::Empty("ground truths".into()));
    }
    let mut total = 0.0;
    for g in gts {
        total += f(preds, g)?;
    }
    Ok(total / gts.len() as f64)
}

/// Mean of [`ade`] over all ground truths. Callers align the ground truths to
/// the query skeleton first (see [`transfer_ground_truths`]).
pub fn mmade(preds: &[PoseSequence], gts: &[PoseSequence]) -> Result<f64> {
    mean_over_gts(preds, gts, ade)
}

pub fn mmfde(preds: &[PoseSequence], gts: &[PoseSequence]) -> Result<f64> {
    mean_over_gts(preds, gts, fde)
}

/// Average pairwise distance between flattened predictions over unordered
/// pairs; `None` for fewer than two predictions.
pub fn diversity(preds: &[PoseSequence]) -> Option<f64> {
    if preds.len() < 2 {
        return None;
    }
    let flat: Vec<Vec<f64>> = preds.iter().map(PoseSequence::to_flat).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..flat.len() {
        for j in i + 1..flat.len() {
            let d: f64 = flat[i].iter().zip(&flat[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            total += d.sqrt();
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

/// Re-expresses every ground-truth future on the skeleton of observation `x`.
pub fn transfer_ground_truths(x: &PoseSequence, gts: &[&PoseSequence], topo: &SkeletonTopology) -> Result<Vec<PoseSequence>> {
    gts.iter().map(|g| motion_transfer(x, g, topo)).collect()
}

/// Source of the multimodal ground truths for held-out samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Ground truths borrowed from training futures.
    TrainMined,
    /// Ground truths mined among held-out futures.
    TestMined,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::TrainMined => "train-mined",
            Protocol::TestMined => "test-mined",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-mined" => Ok(Protocol::TrainMined),
            "test-mined" => Ok(Protocol::TestMined),
            other => Err(Error::InvalidConfig(format!(
                "unknown protocol `{other}` (expected train-mined or test-mined)"
            ))),
        }
    }
}

/// Mines ground truths for the held-out samples under `protocol`.
pub fn mine_for_protocol(
    samples: &[Sample],
    split: &Split,
    topo: &SkeletonTopology,
    threshold: f64,
    protocol: Protocol,
) -> Result<MultimodalGtIndex> {
    let by_id: BTreeMap<usize, &Sample> = samples.iter().map(|s| (s.id, s)).collect();
    let pick = |ids: &[usize]| -> Result<Vec<&Sample>> {
        ids.iter()
            .map(|i| by_id.get(i).copied().ok_or(Error::UnknownSample(*i)))
            .collect()
    };
    let queries = pick(&split.test)?;
    let pool = match protocol {
        Protocol::TrainMined => pick(&split.train)?,
        Protocol::TestMined => queries.clone(),
    };
    mine_against(&queries, &pool, topo, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub budget: usize,
    pub diversity: Option<f64>,
    pub ade: f64,
    pub fde: f64,
    pub mmade: f64,
    pub mmfde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub budget: usize,
    pub samples: usize,
    pub diversity_definition: String,
    pub methods: Vec<MethodMetrics>,
}

impl MetricsReport {
    pub fn method(&self, name: &str) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "protocol: {}  budget: {}  samples: {}  diversity: {}\n",
            self.protocol, self.budget, self.samples, self.diversity_definition
        );
        out.push_str(&format!(
            "{:<14} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "method", "k", "diversity", "ade", "fde", "mmade", "mmfde"
        ));
        for m in &self.methods {
            let div = m.diversity.map_or("-".to_string(), |d| format!("{d:.4}"));
            out.push_str(&format!(
                "{:<14} {:>6} {:>10} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
                m.method, m.budget, div, m.ade, m.fde, m.mmade, m.mmfde
            ));
        }
        out
    }

    /// One JSON object per method, each tagged with the run's protocol.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.methods {
            let record = serde_json::json!({
                "protocol": self.protocol,
                "samples": self.samples,
                "diversity_definition": self.diversity_definition,
                "method": m.method,
                "budget": m.budget,
                "diversity": m.diversity,
                "ade": m.ade,
                "fde": m.fde,
                "mmade": m.mmade,
                "mmfde": m.mmfde,
            });
            out.push_str(&record.to_string());
            out.push('\n');
        }
        out
    }
}

/// Chebyshev radius within which a predicted mode recovers a ground-truth mode.
pub const MODE_RECALL_RADIUS: usize = 3;

/// Headline numbers of an evaluation beyond the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub protocol: Protocol,
    pub budget: usize,
    pub samples: usize,
    pub recall_radius: usize,
    pub mode_recall: f64,
    pub mean_ade_by_rank: Vec<f64>,
    pub first_rank_ade: f64,
    pub last_rank_ade: f64,
}

/// Per-sample details kept alongside the aggregate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEvaluation {
    pub id: usize,
    pub ground_truths: usize,
    /// ADE of each ranked forecast against the sample's own future, by rank.
    pub rank_ade: Vec<f64>,
    pub predicted_modes: Vec<HeatmapCell>,
    /// Maxima of the heatmap stamped from the ground-truth cells.
    pub gt_mode_cells: Vec<HeatmapCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_sample: Vec<SampleEvaluation>,
}

impl Evaluation {
    /// Share of ground-truth mode cells with a predicted maximum within
    /// Chebyshev distance `radius`, pooled over samples.
    pub fn mode_recall(&self, radius: usize) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for s in &self.per_sample {
            for g in &s.gt_mode_cells {
                total += 1;
                if s.predicted_modes.iter().any(|p| p.chebyshev(g) <= radius) {
                    hit += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// Mean ADE to the true future at each rank, over samples that have that rank.
    pub fn mean_ade_by_rank(&self) -> Vec<f64> {
        let depth = self.per_sample.iter().map(|s| s.rank_ade.len()).max().unwrap_or(0);
        (0..depth)
            .map(|r| {
                let vals: Vec<f64> = self.per_sample.iter().filter_map(|s| s.rank_ade.get(r).copied()).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect()
    }

    /// Mean ADE of the first and last ranked forecasts.
    pub fn summary(&self) -> EvaluationSummary {
        let (first, last) = self.first_last_ade();
        EvaluationSummary {
            protocol: self.report.protocol,
            budget: self.report.budget,
            samples: self.report.samples,
            recall_radius: MODE_RECALL_RADIUS,
            mode_recall: self.mode_recall(MODE_RECALL_RADIUS),
            mean_ade_by_rank: self.mean_ade_by_rank(),
            first_rank_ade: first,
            last_rank_ade: last,
        }
    }

    pub fn first_last_ade(&self) -> (f64, f64) {
        let n = self.per_sample.len().max(1) as f64;
        let first = self.per_sample.iter().map(|s| s.rank_ade[0]).sum::<f64>() / n;
        let last = self.per_sample.iter().map(|s| *s.rank_ade.last().unwrap()).sum::<f64>() / n;
        (first, last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub budget: usize,
    /// Stamp width used to turn ground-truth cells into ground-truth modes.
    pub sigma: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { budget: 7, sigma: 1.5 }
    }
}

struct SampleOutcome {
    motionmap: [f64; 5],
    diversity: Option<f64>,
    zero_velocity: [f64; 4],
    detail: SampleEvaluation,
}

/// Forecasts every query in `index` with the given budget and aggregates the
/// metrics of MotionMap and the zero-velocity baseline.
pub fn evaluate(
    model: &MotionMapModel,
    samples: &[Sample],
    index: &MultimodalGtIndex,
    topo: &SkeletonTopology,
    protocol: Protocol,
    config: &EvaluationConfig,
) -> Result<Evaluation> {
    if index.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let by_id: BTreeMap<usize, &Sample> = samples.iter().map(|s| (s.id, s)).collect();
    let queries: Vec<(usize, &[usize])> = index.iter().collect();
    let outcomes: Vec<Result<SampleOutcome>> = queries
        .par_iter()
        .map(|&(id, members)| {
            let s = by_id.get(&id).ok_or(Error::UnknownSample(id))?;
            let gt_samples = members
                .iter()
                .map(|m| by_id.get(m).copied().ok_or(Error::UnknownSample(*m)))
                .collect::<Result<Vec<&Sample>>>()?;
            let gt_refs: Vec<&PoseSequence> = gt_samples.iter().map(|g| &g.y).collect();
            let gts = transfer_ground_truths(&s.x, &gt_refs, topo)?;

            let ranked = model.forecast(&s.x, config.budget)?;
            let preds: Vec<PoseSequence> = ranked.iter().map(|r| r.forecast.clone()).collect();
            let zv = vec![zero_velocity(&s.x, model.future_frames())?];

            let gt_cells = gt_samples
                .iter()
                .map(|g| model.future_cell(model.future_cells.contains_key(&g.id).then_some(g.id), &g.y))
                .collect::<Result<Vec<_>>>()?;
            let gt_map = stamp_heatmap(&gt_cells, config.sigma, model.grid_size())?;
            let gt_modes = extract_maxima(&gt_map, &model.inference.maxima);
            let predicted = extract_maxima(&model.motionmap(&s.x)?, &model.inference.maxima);

            let rank_ade = preds.iter().map(|p| mean_displacement(p, &s.y)).collect();
            Ok(SampleOutcome {
                motionmap: [
                    ade(&preds, &s.y)?,
                    fde(&preds, &s.y)?,
                    mmade(&preds, &gts)?,
                    mmfde(&preds, &gts)?,
                    preds.len() as f64,
                ],
                diversity: diversity(&preds),
                zero_velocity: [ade(&zv, &s.y)?, fde(&zv, &s.y)?, mmade(&zv, &gts)?, mmfde(&zv, &gts)?],
                detail: SampleEvaluation {
                    id,
                    ground_truths: members.len(),
                    rank_ade,
                    predicted_modes: predicted.iter().map(|m| m.cell).collect(),
                    gt_mode_cells: gt_modes.iter().map(|m| m.cell).collect(),
                },
            })
        })
        .collect();

    // Sum in query-id order so the report does not depend on scheduling.
    let mut mm = [0.0; 4];
    let mut zv = [0.0; 4];
    let (mut div_sum, mut div_count) = (0.0, 0usize);
    let mut per_sample = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let o = o?;
        for k in 0..4 {
            mm[k] += o.motionmap[k];
            zv[k] += o.zero_velocity[k];
        }
        if let Some(d) = o.diversity {
            div_sum += d;
            div_count += 1;
        }
        per_sample.push(o.detail);
    }
    let n = per_sample.len() as f64;
    let report = MetricsReport {
        protocol,
        budget: config.budget,
        samples: per_sample.len(),
        diversity_definition: "mean L2 over unordered prediction pairs".into(),
        methods: vec![
            MethodMetrics {
                method: "motionmap".into(),
                budget: config.budget,
                diversity: (div_count > 0).then(|| div_sum / div_count as f64),
                ade: mm[0] / n,
                fde: mm[1] / n,
                mmade: mm[2] / n,
                mmfde: mm[3] / n,
            },
            MethodMetrics {
                method: "zero-velocity".into(),
                budget: 1,
                diversity: None,
                ade: zv[0] / n,
                fde: zv[1] / n,
                mmade: zv[2] / n,
                mmfde: zv[3] / n,
            },
        ],
    };
    Ok(Evaluation { report, per_sample })
}
