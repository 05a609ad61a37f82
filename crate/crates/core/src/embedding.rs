//! Exact t-SNE over future latents, the affine map onto the heatmap grid,
//! integer quantization to cells, and an out-of-sample transform.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A cell of the `m × m` heatmap grid. Ordering is row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub row: usize,
    pub col: usize,
}

impl HeatmapCell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn chebyshev(&self, other: &HeatmapCell) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }

    pub fn squared_distance(&self, other: &HeatmapCell) -> usize {
        let (dr, dc) = (self.row.abs_diff(other.row), self.col.abs_diff(other.col));
        dr * dr + dc * dc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Gradient step; `None` uses `N / 12`.
    pub learning_rate: Option<f64>,
    /// Neighbours used to initialise an out-of-sample point.
    pub transform_neighbors: usize,
    pub transform_steps: usize,
    /// Cells left empty on each side when scaling onto the heatmap.
    pub margin: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 750,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            learning_rate: None,
            transform_neighbors: 5,
            transform_steps: 50,
            margin: 1.0,
        }
    }
}

/// Per-axis affine map from raw t-SNE coordinates to heatmap coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapScaling {
    pub m: usize,
    pub margin: f64,
    pub offset: [f64; 2],
    pub scale: [f64; 2],
}

impl HeatmapScaling {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.margin + (p[0] - self.offset[0]) * self.scale[0],
            self.margin + (p[1] - self.offset[1]) * self.scale[1],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlRecord {
    pub iteration: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub config: TsneConfig,
    pub seed: u64,
    /// Fitted t-SNE coordinates.
    pub raw: Vec<[f64; 2]>,
    pub scaling: Option<HeatmapScaling>,
    /// Latents the embedding was fitted on, retained for `transform_new`.
    pub references: Vec<Vec<f64>>,
    pub kernels: Vec<Kernel>,
    pub kl_trace: Vec<KlRecord>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Conditional affinities `p_{j|i}` over `dist` (squared distances, `None`
/// marks the excluded self entry) with entropy matched to `ln(perplexity)`.
fn calibrated_row(dist: &[Option<f64>], perplexity: f64) -> Vec<f64> {
    calibrate(dist, perplexity).0
}

/// Calibrated conditional row together with its kernel: `p_j = exp(-beta (d_j - shift)) / sum`.
fn calibrate(dist: &[Option<f64>], perplexity: f64) -> (Vec<f64>, Kernel) {
    let target = perplexity.ln();
    let min = dist.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
    let mut row = vec![0.0; dist.len()];
    let mut kernel = Kernel {
        beta,
        shift: min,
        sum: 1.0,
    };
    for _ in 0..200 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (p, d) in row.iter_mut().zip(dist) {
            *p = match d {
                // Shifting by the minimum keeps exp() from underflowing to all zeros.
                Some(d) => (-(d - min) * beta).exp(),
                None => 0.0,
            };
            sum += *p;
            weighted += *p * d.map_or(0.0, |d| d - min);
        }
        let entropy = sum.ln() + beta * weighted / sum;
        for p in row.iter_mut() {
            *p /= sum;
        }
        kernel = Kernel {
            beta,
            shift: min,
            sum,
        };
        let diff = entropy - target;
        if diff.abs() < 1e-10 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    (row, kernel)
}

/// Gaussian kernel of one reference point, as calibrated during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub beta: f64,
    pub shift: f64,
    pub sum: f64,
}

impl Kernel {
    /// Conditional affinity this reference would give a newly inserted point.
    fn affinity(&self, d: f64) -> f64 {
        let a = (-(d - self.shift) * self.beta).exp();
        a / (self.sum + a)
    }
}

fn check_latents(latents: &[Vec<f64>]) -> Result<usize> {
    if latents.len() < 2 {
        return Err(Error::Empty("embedding needs at least two latents".into()));
    }
    let n = latents[0].len();
    for (i, z) in latents.iter().enumerate() {
        if z.len() != n {
            return Err(Error::shape(format!("latent {i}"), n, z.len()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent {i}")));
        }
    }
    Ok(n)
}

/// Symmetrized joint affinities, row-major `N × N`.
fn joint_affinities(latents: &[Vec<f64>], perplexity: f64) -> (Vec<f64>, Vec<Kernel>) {
    let n = latents.len();
    let (rows, kernels): (Vec<Vec<f64>>, Vec<Kernel>) = (0..n)
        .into_par_iter()
        .map(|i| {
            let dist: Vec<Option<f64>> = (0..n)
                .map(|j| (j != i).then(|| squared_distance(&latents[i], &latents[j])))
                .collect();
            calibrate(&dist, perplexity)
        })
        .unzip();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((rows[i][j] + rows[j][i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    (p, kernels)
}

/// KL divergence and its gradient for the current layout. `scale` multiplies P.
fn kl_and_gradient(p: &[f64], y: &[[f64; 2]], scale: f64) -> (f64, Vec<[f64; 2]>) {
    let n = y.len();
    let num = |i: usize, j: usize| {
        let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
        1.0 / (1.0 + dx * dx + dy * dy)
    };
    let row_sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| j != i).map(|j| num(i, j)).sum())
        .collect();
    let z: f64 = row_sums.iter().sum();
    let rows: Vec<(f64, [f64; 2])> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = [0.0; 2];
            let mut kl = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = num(i, j);
                let q = (w / z).max(1e-12);
                let pij = p[i * n + j];
                kl += pij * (pij / q).ln();
                let f = 4.0 * (scale * pij - q) * w;
                g[0] += f * (y[i][0] - y[j][0]);
                g[1] += f * (y[i][1] - y[j][1]);
            }
            (kl, g)
        })
        .collect();
    let kl = rows.iter().map(|r| r.0).sum();
    (kl, rows.into_iter().map(|r| r.1).collect())
}

/// Fits a 2D t-SNE embedding of `latents`.
pub fn fit_embedding(latents: &[Vec<f64>], config: &TsneConfig, seed: u64) -> Result<Embedding2D> {
    check_latents(latents)?;
    let n = latents.len();
    if !(config.perplexity > 0.0) || config.perplexity >= n as f64 {
        return Err(Error::InvalidConfig(format!(
            "perplexity {} must lie in (0, {n})",
            config.perplexity
        )));
    }
    let (p, kernels) = joint_affinities(latents, config.perplexity);
    let lr = config.learning_rate.unwrap_or(n as f64 / 12.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut trace = Vec::new();

    for it in 0..config.iterations {
        let early = it < config.exaggeration_iterations;
        let scale = if early { config.exaggeration } else { 1.0 };
        let momentum = if early {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let (_, grad) = kl_and_gradient(&p, &y, scale);
        for i in 0..n {
            for d in 0..2 {
                gains[i][d] = if (grad[i][d] > 0.0) != (velocity[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                velocity[i][d] = momentum * velocity[i][d] - lr * gains[i][d] * grad[i][d];
                y[i][d] += velocity[i][d];
            }
        }
        let mean = y.iter().fold([0.0; 2], |a, p| [a[0] + p[0], a[1] + p[1]]);
        for p in y.iter_mut() {
            p[0] -= mean[0] / n as f64;
            p[1] -= mean[1] / n as f64;
        }
        let done = it + 1;
        if done % 50 == 0 || done == config.exaggeration_iterations || done == config.iterations {
            trace.push(KlRecord {
                iteration: done,
                kl: kl_and_gradient(&p, &y, 1.0).0,
            });
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            stage: "embedding".into(),
            epoch: config.iterations,
            loss: f64::NAN,
        });
    }
    Ok(Embedding2D {
        config: *config,
        seed,
        raw: y,
        scaling: None,
        references: latents.to_vec(),
        kernels,
        kl_trace: trace,
    })
}

/// Rounds half up per axis and clamps onto `[0, m-1]²`; the first coordinate
/// selects the row.
pub fn quantize(point: [f64; 2], m: usize) -> HeatmapCell {
    let q = |v: f64| {
        let r = (v + 0.5).floor();
        if r.is_nan() || r < 0.0 {
            0
        } else {
            (r as usize).min(m - 1)
        }
    };
    HeatmapCell::new(q(point[0]), q(point[1]))
}

impl Embedding2D {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.references.first().map_or(0, Vec::len)
    }

    /// Fitted positions, in heatmap coordinates once scaled.
    pub fn points(&self) -> Vec<[f64; 2]> {
        match &self.scaling {
            Some(s) => self.raw.iter().map(|&p| s.apply(p)).collect(),
            None => self.raw.clone(),
        }
    }

    pub fn grid_size(&self) -> Option<usize> {
        self.scaling.map(|s| s.m)
    }

    /// Maps each axis so that its minimum lands on `margin` and its maximum on
    /// `m - 1 - margin`.
    pub fn scale_to_heatmap(mut self, m: usize) -> Result<Self> {
        let margin = self.config.margin;
        if m < 2 || !(margin >= 0.0) || (m - 1) as f64 - 2.0 * margin <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "heatmap side {m} cannot hold a margin of {margin}"
            )));
        }
        let span = (m - 1) as f64 - 2.0 * margin;
        let mut offset = [0.0; 2];
        let mut scale = [0.0; 2];
        for d in 0..2 {
            let lo = self.raw.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
            let hi = self.raw.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
            if !(hi - lo > 1e-12) {
                return Err(Error::DegenerateExtent(d));
            }
            offset[d] = lo;
            scale[d] = span / (hi - lo);
        }
        self.scaling = Some(HeatmapScaling {
            m,
            margin,
            offset,
            scale,
        });
        Ok(self)
    }

    /// Cell of fitted point `i`.
    pub fn cell_of(&self, i: usize) -> Result<HeatmapCell> {
        let s = self.scaling.ok_or_else(|| Error::InvalidConfig("embedding is not scaled".into()))?;
        Ok(quantize(s.apply(self.raw[i]), s.m))
    }

    /// Places an unseen latent in heatmap coordinates: start from the
    /// affinity-weighted mean of its nearest references, then descend on the
    /// new point's own KL terms with the references held fixed.
    pub fn transform_new(&self, latent: &[f64]) -> Result<[f64; 2]> {
        let scaling = self.scaling.ok_or_else(|| Error::InvalidConfig("embedding is not scaled".into()))?;
        let raw = self.transform_raw(latent)?;
        Ok(scaling.apply(raw))
    }

    fn transform_raw(&self, latent: &[f64]) -> Result<[f64; 2]> {
        if self.references.is_empty() {
            return Err(Error::Empty("embedding reference set".into()));
        }
        if latent.len() != self.latent_dim() {
            return Err(Error::shape("latent", self.latent_dim(), latent.len()));
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent".into()));
        }
        let n = self.references.len();
        let dist: Vec<Option<f64>> = self
            .references
            .iter()
            .map(|r| Some(squared_distance(latent, r)))
            .collect();
        let perplexity = self.config.perplexity.min((n as f64 - 1.0).max(1.0));
        let p = calibrated_row(&dist, perplexity);

        let mut nearest: Vec<usize> = (0..n).collect();
        nearest.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(&b)));
        nearest.truncate(self.config.transform_neighbors.max(1));
        let wsum: f64 = nearest.iter().map(|&j| p[j]).sum();
        let mut y = [0.0; 2];
        for &j in &nearest {
            // Fall back to a plain mean if every neighbour's affinity underflowed.
            let w = if wsum > 0.0 { p[j] / wsum } else { 1.0 / nearest.len() as f64 };
            y[0] += w * self.raw[j][0];
            y[1] += w * self.raw[j][1];
        }

        // Symmetrize like the fitted joint affinities when kernels are available.
        let p: Vec<f64> = if self.kernels.len() == n {
            let sym: Vec<f64> = p
                .iter()
                .zip(&self.kernels)
                .zip(&dist)
                .map(|((pj, k), d)| pj + k.affinity(d.unwrap_or(0.0)))
                .collect();
            let total: f64 = sym.iter().sum();
            sym.into_iter().map(|v| v / total).collect()
        } else {
            p
        };

        let objective = |y: [f64; 2]| -> (f64, [f64; 2]) {
            let nums: Vec<f64> = self
                .raw
                .iter()
                .map(|r| 1.0 / (1.0 + (y[0] - r[0]).powi(2) + (y[1] - r[1]).powi(2)))
                .collect();
            let z: f64 = nums.iter().sum();
            let mut kl = 0.0;
            let mut g = [0.0; 2];
            for ((r, &w), &pj) in self.raw.iter().zip(&nums).zip(&p) {
                let q = w / z;
                if pj > 0.0 {
                    kl += pj * (pj / q.max(1e-300)).ln();
                }
                let f = 4.0 * (pj - q) * w;
                g[0] += f * (y[0] - r[0]);
                g[1] += f * (y[1] - r[1]);
            }
            (kl, g)
        };

        let mut step = 1.0;
        let (mut kl, mut g) = objective(y);
        for _ in 0..self.config.transform_steps {
            let mut accepted = false;
            for _ in 0..30 {
                let cand = [y[0] - step * g[0], y[1] - step * g[1]];
                let (ckl, cg) = objective(cand);
                if ckl <= kl {
                    y = cand;
                    kl = ckl;
                    g = cg;
                    step *= 1.2;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(y)
    }

    /// Tab-separated `x y group` rows, one per fitted point.
    pub fn export_density(&self, groups: &[String]) -> Result<String> {
        if groups.len() != self.len() {
            return Err(Error::shape("density groups", self.len(), groups.len()));
        }
        let mut out = String::from("x\ty\tgroup\n");
        for (p, g) in self.points().iter().zip(groups) {
            writeln!(out, "{:.6}\t{:.6}\t{g}", p[0], p[1]).unwrap();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TsneConfig {
        TsneConfig {
            perplexity: 5.0,
            iterations: 300,
            exaggeration_iterations: 100,
            ..TsneConfig::default()
        }
    }

    fn clusters(per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut latents = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for _ in 0..per {
                let z: Vec<f64> = (0..8)
                    .map(|d| if d == c { 10.0 } else { 0.0 } + noise.sample(&mut rng))
                    .collect();
                latents.push(z);
                labels.push(c);
            }
        }
        (latents, labels)
    }

    #[test]
    fn entropy_matches_perplexity() {
        let dist: Vec<Option<f64>> = (0..40).map(|i| Some((i as f64 * 0.37).sin().abs() * 5.0)).collect();
        let p = calibrated_row(&dist, 10.0);
        let h: f64 = -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
        assert!((h - 10f64.ln()).abs() < 1e-8);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_points_separate() {
        let cfg = TsneConfig {
            perplexity: 0.5,
            iterations: 50,
            exaggeration_iterations: 10,
            ..TsneConfig::default()
        };
        let e = fit_embedding(&[vec![0.0, 1.0], vec![1.0, 0.0]], &cfg, 0).unwrap();
        let d = ((e.raw[0][0] - e.raw[1][0]).powi(2) + (e.raw[0][1] - e.raw[1][1]).powi(2)).sqrt();
        assert!(d > 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = TsneConfig::default();
        assert!(fit_embedding(&[vec![0.0]], &cfg, 0).is_err());
        assert!(fit_embedding(&[vec![0.0], vec![1.0], vec![2.0]], &cfg, 0).is_err());
        let bad = vec![vec![0.0], vec![f64::NAN], vec![1.0]];
        assert!(fit_embedding(&bad, &TsneConfig { perplexity: 1.0, ..cfg }, 0).is_err());
    }

    #[test]
    fn deterministic_and_kl_decreases_after_exaggeration() {
        let (z, _) = clusters(15, 1);
        let a = fit_embedding(&z, &small_config(), 3).unwrap();
        let b = fit_embedding(&z, &small_config(), 3).unwrap();
        assert_eq!(a, b);
        let end_early = a.kl_trace.iter().find(|r| r.iteration == 100).unwrap().kl;
        assert!(a.kl_trace.last().unwrap().kl <= end_early);
    }

    #[test]
    fn scaling_hits_margins_and_preserves_order() {
        let (z, _) = clusters(10, 2);
        let e = fit_embedding(&z, &small_config(), 0).unwrap().scale_to_heatmap(64).unwrap();
        let pts = e.points();
        for d in 0..2 {
            let lo = pts.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
            assert!((lo - 1.0).abs() < 1e-9 && (hi - 62.0).abs() < 1e-9);
            let mut by_raw: Vec<usize> = (0..pts.len()).collect();
            by_raw.sort_by(|&a, &b| e.raw[a][d].partial_cmp(&e.raw[b][d]).unwrap());
            assert!(by_raw.windows(2).all(|w| pts[w[0]][d] <= pts[w[1]][d]));
        }
        let again = e.clone().scale_to_heatmap(64).unwrap();
        for (a, b) in again.points().iter().zip(&pts) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_extent_is_an_error() {
        let e = Embedding2D {
            config: TsneConfig::default(),
            seed: 0,
            raw: vec![[0.0, 1.0], [0.0, 2.0]],
            scaling: None,
            references: vec![vec![0.0], vec![1.0]],
            kernels: vec![],
            kl_trace: vec![],
        };
        assert!(matches!(e.scale_to_heatmap(64), Err(Error::DegenerateExtent(_))));
    }

    #[test]
    fn quantize_rounds_half_up_and_clamps() {
        assert_eq!(quantize([3.4, 7.6], 64), HeatmapCell::new(3, 8));
        assert_eq!(quantize([-0.4, 63.4], 64), HeatmapCell::new(0, 63));
        assert_eq!(quantize([2.5, -7.0], 64), HeatmapCell::new(3, 0));
        assert_eq!(quantize([1e9, 0.49], 64), HeatmapCell::new(63, 0));
    }

    #[test]
    fn equidistant_pair_initialises_at_midpoint() {
        let e = Embedding2D {
            config: TsneConfig {
                transform_neighbors: 2,
                transform_steps: 0,
                margin: 0.0,
                ..TsneConfig::default()
            },
            seed: 0,
            raw: vec![[0.0, 0.0], [4.0, 2.0]],
            scaling: Some(HeatmapScaling {
                m: 10,
                margin: 0.0,
                offset: [0.0; 2],
                scale: [1.0; 2],
            }),
            references: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            kernels: vec![],
            kl_trace: vec![],
        };
        let p = e.transform_new(&[0.0, 3.0]).unwrap();
        assert!((p[0] - 2.0).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_export_rows() {
        let (z, labels) = clusters(5, 0);
        let e = fit_embedding(&z, &TsneConfig { perplexity: 3.0, ..small_config() }, 0).unwrap();
        let groups: Vec<String> = labels.iter().map(|l| format!("c{l}")).collect();
        let text = e.export_density(&groups).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 15);
        for r in rows {
            let cols: Vec<&str> = r.split('\t').collect();
            assert!(cols[0].parse::<f64>().unwrap().is_finite());
            assert!(cols[1].parse::<f64>().unwrap().is_finite());
        }
        assert!(e.export_density(&groups[..3]).is_err());
    }
}
