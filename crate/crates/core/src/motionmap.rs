//! MotionMaps: Gaussian-stamped ground-truth heatmaps, the cell → latent
//! codebook, the heatmap predictor `H`, and deterministic mode extraction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{EpochRecord, TrainOptions};
use crate::data::mining::MATCH_FRAMES;
use crate::embedding::HeatmapCell;
use crate::error::{Error, Result};
use crate::kinematics::PoseSequence;
use crate::nn::loss::weighted_bce as bce_value;
use crate::nn::{Adam, Conv1x1, Dense, Gradients, GruCell, ParameterStore, Tape, Var};

/// An `m × m` grid of values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    m: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn new(m: usize, values: Vec<f64>) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidConfig("heatmap side must be positive".into()));
        }
        if values.len() != m * m {
            return Err(Error::shape("heatmap", m * m, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self { m, values })
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            m,
            values: vec![0.0; m * m],
        }
    }

    pub fn side(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, cell: HeatmapCell) -> f64 {
        self.values[cell.row * self.m + cell.col]
    }

    pub fn contains(&self, cell: HeatmapCell) -> bool {
        cell.row < self.m && cell.col < self.m
    }

    /// Cells in descending value, ties in row-major order.
    pub fn cells_by_value(&self) -> Vec<HeatmapCell> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx.into_iter()
            .map(|i| HeatmapCell::new(i / self.m, i % self.m))
            .collect()
    }

    /// Binary portable grey map (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.m, self.m).into_bytes();
        out.extend(self.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    /// One row per cell: `row col value`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("row\tcol\tvalue\n");
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{}\t{}\t{v:.6}", i / self.m, i % self.m).unwrap();
        }
        out
    }

    pub fn weighted_bce(&self, target: &Heatmap, pos_weight: f64) -> Result<f64> {
        weighted_bce(self, target, pos_weight)
    }
}

/// Mean over cells of `-(w t ln p + (1 - t) ln(1 - p))`, `p` clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce(pred: &Heatmap, target: &Heatmap, pos_weight: f64) -> Result<f64> {
    if pred.m != target.m {
        return Err(Error::shape("bce heatmaps", target.m, pred.m));
    }
    if !(pos_weight >= 1.0) {
        return Err(Error::InvalidConfig(format!("positive weight {pos_weight} < 1")));
    }
    Ok(bce_value(&pred.values, &target.values, pos_weight))
}

/// Max-combines unnormalized Gaussian bumps of width `sigma` (in cells) with
/// peak 1 at every distinct input cell.
pub fn stamp_heatmap(cells: &[HeatmapCell], sigma: f64, m: usize) -> Result<Heatmap> {
    if cells.is_empty() {
        return Err(Error::Empty("cells to stamp".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("stamp width {sigma} must be positive")));
    }
    let mut distinct: Vec<HeatmapCell> = cells.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if let Some(c) = distinct.iter().find(|c| c.row >= m || c.col >= m) {
        return Err(Error::CellOutOfRange {
            row: c.row,
            col: c.col,
            m,
        });
    }
    let denom = 2.0 * sigma * sigma;
    let mut values = vec![0.0f64; m * m];
    for c in &distinct {
        for (i, v) in values.iter_mut().enumerate() {
            let (dr, dc) = ((i / m) as f64 - c.row as f64, (i % m) as f64 - c.col as f64);
            *v = v.max((-(dr * dr + dc * dc) / denom).exp());
        }
    }
    Heatmap::new(m, values)
}

/// A local maximum of a MotionMap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub cell: HeatmapCell,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaximaConfig {
    pub threshold: f64,
    pub nms_radius: usize,
    pub max_modes: Option<usize>,
}

impl Default for MaximaConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            nms_radius: 3,
            max_modes: None,
        }
    }
}

fn is_local_max(hm: &Heatmap, r: usize, c: usize) -> bool {
    let m = hm.m;
    let v = hm.values[r * m + c];
    for nr in r.saturating_sub(1)..=(r + 1).min(m - 1) {
        for nc in c.saturating_sub(1)..=(c + 1).min(m - 1) {
            if (nr, nc) != (r, c) && hm.values[nr * m + nc] > v {
                return false;
            }
        }
    }
    true
}

/// Cells at least as high as each of their (up to) eight neighbours and the
/// threshold, greedily accepted by value (row-major on ties) with Chebyshev
/// suppression of radius `nms_radius`.
pub fn extract_maxima(hm: &Heatmap, config: &MaximaConfig) -> Vec<Mode> {
    let m = hm.m;
    let mut candidates: Vec<HeatmapCell> = (0..m * m)
        .filter(|&i| hm.values[i] >= config.threshold && is_local_max(hm, i / m, i % m))
        .map(|i| HeatmapCell::new(i / m, i % m))
        .collect();
    candidates.sort_by(|a, b| hm.at(*b).total_cmp(&hm.at(*a)).then(a.cmp(b)));
    let limit = config.max_modes.unwrap_or(usize::MAX);
    let mut modes: Vec<Mode> = Vec::new();
    for c in candidates {
        if modes.len() >= limit {
            break;
        }
        if modes.iter().all(|md| md.cell.chebyshev(&c) > config.nms_radius) {
            modes.push(Mode {
                cell: c,
                confidence: hm.at(c),
            });
        }
    }
    modes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Result of a codebook query: the cell actually used and its mean latent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodebookHit<'a> {
    pub cell: HeatmapCell,
    pub latent: &'a [f64],
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub m: usize,
    pub n: usize,
    #[serde(with = "entry_list")]
    entries: BTreeMap<HeatmapCell, CodebookEntry>,
}

/// Stores the cell map as a list, since JSON object keys must be strings.
mod entry_list {
    use super::{BTreeMap, CodebookEntry, HeatmapCell};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Row {
        cell: HeatmapCell,
        #[serde(flatten)]
        entry: CodebookEntry,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<HeatmapCell, CodebookEntry>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Row> = map
            .iter()
            .map(|(c, e)| Row {
                cell: *c,
                entry: e.clone(),
            })
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<HeatmapCell, CodebookEntry>, D::Error> {
        let rows = Vec::<Row>::deserialize(d)?;
        let len = rows.len();
        let map: BTreeMap<_, _> = rows.into_iter().map(|r| (r.cell, r.entry)).collect();
        if map.len() != len {
            return Err(serde::de::Error::custom("duplicate codebook cell"));
        }
        Ok(map)
    }
}

/// Bits of a dense `m × m × n` table of 32-bit entries.
pub fn size_estimate_bits(m: u64, n: u64) -> u64 {
    32 * m * m * n
}

/// Groups latents by cell and stores each cell's arithmetic mean, summed in
/// input order.
pub fn build_codebook(pairs: &[(HeatmapCell, Vec<f64>)], m: usize, n: usize) -> Result<Codebook> {
    if pairs.is_empty() {
        return Err(Error::Empty("codebook input".into()));
    }
    let mut sums: BTreeMap<HeatmapCell, (Vec<f64>, usize)> = BTreeMap::new();
    for (cell, z) in pairs {
        if cell.row >= m || cell.col >= m {
            return Err(Error::CellOutOfRange {
                row: cell.row,
                col: cell.col,
                m,
            });
        }
        if z.len() != n {
            return Err(Error::shape("codebook latent", n, z.len()));
        }
        let slot = sums.entry(*cell).or_insert_with(|| (vec![0.0; n], 0));
        for (s, v) in slot.0.iter_mut().zip(z) {
            *s += v;
        }
        slot.1 += 1;
    }
    let entries = sums
        .into_iter()
        .map(|(cell, (sum, count))| {
            let mean = sum.into_iter().map(|s| s / count as f64).collect();
            (cell, CodebookEntry { mean, count })
        })
        .collect();
    Ok(Codebook { m, n, entries })
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, cell: HeatmapCell) -> Option<&CodebookEntry> {
        self.entries.get(&cell)
    }

    pub fn iter(&self) -> impl Iterator<Item = (HeatmapCell, &CodebookEntry)> {
        self.entries.iter().map(|(c, e)| (*c, e))
    }

    pub fn size_estimate_bits(&self) -> u64 {
        size_estimate_bits(self.m as u64, self.n as u64)
    }

    /// The dense-size estimate in mebibits (2^20 bits).
    pub fn size_estimate_mebibits(&self) -> f64 {
        self.size_estimate_bits() as f64 / (1u64 << 20) as f64
    }

    /// Exact hit, or the nearest populated cell within Euclidean `radius`
    /// (row-major first on ties).
    pub fn lookup(&self, cell: HeatmapCell, radius: f64) -> Result<CodebookHit<'_>> {
        if cell.row >= self.m || cell.col >= self.m {
            return Err(Error::CellOutOfRange {
                row: cell.row,
                col: cell.col,
                m: self.m,
            });
        }
        if let Some(e) = self.entries.get(&cell) {
            return Ok(CodebookHit {
                cell,
                latent: &e.mean,
                fallback: false,
            });
        }
        let mut best: Option<(usize, HeatmapCell, &CodebookEntry)> = None;
        for (c, e) in &self.entries {
            let d = c.squared_distance(&cell);
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, *c, e));
            }
        }
        match best {
            Some((d, c, e)) if (d as f64).sqrt() <= radius => Ok(CodebookHit {
                cell: c,
                latent: &e.mean,
                fallback: true,
            }),
            _ => Err(Error::NoPopulatedCell {
                row: cell.row,
                col: cell.col,
                radius,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapModelDims {
    pub joints: usize,
    pub m: usize,
    pub hidden: usize,
    pub channels: usize,
    /// Number of hidden 1×1 convolutions before the output convolution.
    pub conv_layers: usize,
}

/// The MotionMap predictor: a GRU over the last three observed frames, a
/// dense projection to an `m × m` grid, and a stack of 1×1 convolutions with
/// ELU activations capped by a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapModel {
    pub dims: HeatmapModelDims,
    pub params: ParameterStore,
    encoder: GruCell,
    project: Dense,
    convs: Vec<Conv1x1>,
}

impl HeatmapModel {
    pub fn new(dims: HeatmapModelDims, seed: u64) -> Result<Self> {
        if dims.joints == 0 || dims.m < 2 || dims.hidden == 0 || dims.channels == 0 {
            return Err(Error::InvalidConfig("heatmap model dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new();
        GruCell::new(&mut p, "hm.gru", 3 * dims.joints, dims.hidden, &mut rng)?;
        Dense::new(&mut p, "hm.proj", dims.hidden, dims.m * dims.m, &mut rng)?;
        let mut cin = 1;
        for k in 0..dims.conv_layers {
            Conv1x1::new(&mut p, &format!("hm.conv{k}"), cin, dims.channels, &mut rng)?;
            cin = dims.channels;
        }
        Conv1x1::new(&mut p, &format!("hm.conv{}", dims.conv_layers), cin, 1, &mut rng)?;
        Self::from_params(dims, p)
    }

    pub fn from_params(dims: HeatmapModelDims, params: ParameterStore) -> Result<Self> {
        let encoder = GruCell::bind(&params, "hm.gru")?;
        let project = Dense::bind(&params, "hm.proj")?;
        let convs = (0..=dims.conv_layers)
            .map(|k| Conv1x1::bind(&params, &format!("hm.conv{k}")))
            .collect::<Result<Vec<_>>>()?;
        let ok = encoder.input == 3 * dims.joints
            && encoder.hidden == dims.hidden
            && project.output == dims.m * dims.m
            && convs.last().is_some_and(|c| c.cout == 1)
            && convs[0].cin == 1;
        if !ok {
            return Err(Error::MalformedCheckpoint(
                "heatmap model parameters disagree with its dims".into(),
            ));
        }
        Ok(Self {
            dims,
            params,
            encoder,
            project,
            convs,
        })
    }

    fn forward_on(&self, tape: &mut Tape, x: &PoseSequence) -> Result<Var> {
        let n = x.num_frames();
        let inputs: Vec<Var> = (n - MATCH_FRAMES..n)
            .map(|f| tape.constant(x.frame(f).iter().flatten().copied().collect()))
            .collect();
        let h = self.encoder.encode(tape, &inputs)?;
        let mut g = self.project.forward(tape, h)?;
        let last = self.convs.len() - 1;
        for (k, conv) in self.convs.iter().enumerate() {
            g = conv.forward(tape, g)?;
            if k < last {
                g = tape.elu(g);
            }
        }
        Ok(tape.sigmoid(g))
    }

    fn check_input(&self, x: &PoseSequence) -> Result<()> {
        if x.joints() != self.dims.joints {
            return Err(Error::TopologyMismatch {
                expected: self.dims.joints,
                actual: x.joints(),
            });
        }
        if x.num_frames() < MATCH_FRAMES {
            return Err(Error::shape(
                "observation",
                format!("at least {MATCH_FRAMES} frames"),
                x.num_frames(),
            ));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("observation".into()));
        }
        Ok(())
    }

    fn loss_and_grads(&self, x: &PoseSequence, target: &Heatmap, pos_weight: f64) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(&self.params);
        let pred = self.forward_on(&mut tape, x)?;
        let loss = tape.weighted_bce(pred, target.values.clone(), pos_weight);
        let value = tape.value(loss)[0];
        Ok((value, tape.backward_scalar(loss)?.params))
    }
}

/// Predicts a MotionMap from the last three frames of `x`.
pub fn predict_motionmap(model: &HeatmapModel, x: &PoseSequence) -> Result<Heatmap> {
    model.check_input(x)?;
    let mut tape = Tape::new(&model.params);
    let out = model.forward_on(&mut tape, x)?;
    Ok(Heatmap {
        m: model.dims.m,
        values: tape.value(out).to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct HeatmapTrainReport {
    pub loss_curve: Vec<f64>,
    pub optimizer: Adam,
}

/// Minimizes the weighted BCE between predicted and stamped ground-truth maps.
pub fn train_heatmap_model(
    model: &mut HeatmapModel,
    examples: &[(&PoseSequence, &Heatmap)],
    pos_weight: f64,
    opts: &TrainOptions,
    progress: &mut dyn FnMut(EpochRecord),
) -> Result<HeatmapTrainReport> {
    if examples.is_empty() {
        return Err(Error::Empty("heatmap training set".into()));
    }
    if !(pos_weight >= 1.0) {
        return Err(Error::InvalidConfig(format!("positive weight {pos_weight} < 1")));
    }
    for (x, hm) in examples {
        model.check_input(x)?;
        if hm.m != model.dims.m {
            return Err(Error::shape("target heatmap", model.dims.m, hm.m));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.adam, &model.params);
    let trainable: Vec<usize> = (0..model.params.len()).collect();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let m = &*model;
            let results: Vec<Result<(f64, Gradients)>> = chunk
                .par_iter()
                .map(|&k| m.loss_and_grads(examples[k].0, examples[k].1, pos_weight))
                .collect();
            let mut grads = Gradients::zeros_like(&model.params);
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        stage: "motionmap".into(),
                        epoch,
                        loss,
                    });
                }
                total_loss += loss;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            adam.step(&mut model.params, &grads, &trainable)?;
        }
        let mean = total_loss / examples.len() as f64;
        curve.push(mean);
        progress(EpochRecord {
            stage: "motionmap".into(),
            epoch,
            loss: mean,
        });
    }
    Ok(HeatmapTrainReport {
        loss_curve: curve,
        optimizer: adam,
    })
}
