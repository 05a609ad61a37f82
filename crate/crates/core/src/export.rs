//! Figure-style exports of a trained model and the manifest that ties every
//! exported file to the figure it mirrors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MultimodalGtIndex, Sample};
use crate::error::{Error, Result};
use crate::motionmap::{extract_maxima, stamp_heatmap, Heatmap, Mode};
use crate::pipeline::{MotionMapModel, RankedForecast};

pub const MANIFEST_FILE: &str = "manifest.toml";
/// Files an export directory may hold besides the manifest's entries.
pub const PROVENANCE_FILES: [&str; 2] = [MANIFEST_FILE, "config.toml"];

pub const DENSITY_ANALOGUE: &str = "density map of training and held-out futures";
pub const OVERLAY_ANALOGUE: &str = "predicted MotionMap overlaid on the ground-truth heatmap";
pub const RANKED_ANALOGUE: &str = "ranked forecasts with confidences";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Path relative to the export directory, `/`-separated.
    pub export: String,
    pub analogue: String,
    pub command: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FigureManifest {
    #[serde(default, rename = "entry")]
    pub entries: Vec<ManifestEntry>,
}

impl FigureManifest {
    pub fn push(&mut self, export: impl Into<String>, analogue: &str, command: &str) {
        self.entries.push(ManifestEntry {
            export: export.into(),
            analogue: analogue.into(),
            command: command.into(),
        });
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ManifestMismatch {
    /// Listed in the manifest but absent from the directory.
    Missing(String),
    /// Present in the directory but not listed.
    Extra(String),
    /// Listed more than once.
    Duplicate(String),
}

impl fmt::Display for ManifestMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Missing(p) => write!(f, "missing export `{p}`"),
            Self::Extra(p) => write!(f, "unlisted file `{p}`"),
            Self::Duplicate(p) => write!(f, "`{p}` listed more than once"),
        }
    }
}

/// Compares `manifest` with the files under `dir`; an empty list means the
/// two correspond one to one.
pub fn check_manifest(manifest: &FigureManifest, dir: &Path) -> Result<Vec<ManifestMismatch>> {
    let mut present = BTreeSet::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(dir, e.into()))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(dir).expect("walk stays under root");
            let parts: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect();
            present.insert(parts.join("/"));
        }
    }
    for p in PROVENANCE_FILES {
        present.remove(p);
    }
    let mut issues = Vec::new();
    let mut listed = BTreeSet::new();
    for e in &manifest.entries {
        if !listed.insert(e.export.clone()) {
            issues.push(ManifestMismatch::Duplicate(e.export.clone()));
        }
    }
    issues.extend(listed.difference(&present).cloned().map(ManifestMismatch::Missing));
    issues.extend(present.difference(&listed).cloned().map(ManifestMismatch::Extra));
    issues.sort();
    issues.dedup();
    Ok(issues)
}

/// Embedded futures as `x y split label` rows: fitted training points
/// followed by out-of-sample transforms of the held-out futures.
pub fn density_map(model: &MotionMapModel, train: &[Sample], test: &[Sample]) -> Result<String> {
    let points = model.embedding.points();
    if points.len() != train.len() {
        return Err(Error::shape("density training futures", points.len(), train.len()));
    }
    let mut out = String::from("x\ty\tsplit\tlabel\n");
    for (p, s) in points.iter().zip(train) {
        writeln!(out, "{:.6}\t{:.6}\ttrain\t{}", p[0], p[1], s.action_label).unwrap();
    }
    for s in test {
        let z = model.autoencoder.encode_future(&s.y)?;
        let p = model.embedding.transform_new(&z.0)?;
        writeln!(out, "{:.6}\t{:.6}\ttest\t{}", p[0], p[1], s.action_label).unwrap();
    }
    Ok(out)
}

/// Grey-map (binary PGM) of the predicted MotionMap blended with the
/// ground-truth heatmap. Blended values occupy [0, 200]; predicted maxima
/// are drawn as 255-valued crosses.
pub fn heatmap_overlay(predicted: &Heatmap, ground_truth: &Heatmap, modes: &[Mode]) -> Result<Vec<u8>> {
    let m = predicted.side();
    if ground_truth.side() != m {
        return Err(Error::shape("overlay ground truth", m, ground_truth.side()));
    }
    let mut grey: Vec<u8> = predicted
        .values()
        .iter()
        .zip(ground_truth.values())
        .map(|(p, g)| (100.0 * (p + g)).round().clamp(0.0, 200.0) as u8)
        .collect();
    for mode in modes {
        let (r, c) = (mode.cell.row as isize, mode.cell.col as isize);
        for (dr, dc) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (rr, cc) = (r + dr, c + dc);
            if (0..m as isize).contains(&rr) && (0..m as isize).contains(&cc) {
                grey[rr as usize * m + cc as usize] = 255;
            }
        }
    }
    let mut out = format!("P5\n{m} {m}\n255\n").into_bytes();
    out.extend(grey);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDump {
    pub sample: usize,
    pub action_label: String,
    pub ground_truth: Vec<f64>,
    pub forecasts: Vec<RankedForecast>,
}

/// Files written by [`export_all`], keyed by relative path.
pub type ExportFiles = BTreeMap<String, Vec<u8>>;

/// Renders every export for `samples` (held-out queries) and their
/// multimodal ground truths in `index`, plus the manifest describing them.
pub fn render_exports(
    model: &MotionMapModel,
    train: &[Sample],
    test: &[Sample],
    index: &MultimodalGtIndex,
    samples: &[&Sample],
    budget: usize,
    sigma: f64,
    command: &str,
) -> Result<(ExportFiles, FigureManifest)> {
    let mut files = ExportFiles::new();
    let mut manifest = FigureManifest::default();
    files.insert("density.tsv".into(), density_map(model, train, test)?.into_bytes());
    manifest.push("density.tsv", DENSITY_ANALOGUE, command);

    let by_id: BTreeMap<usize, &Sample> = train.iter().chain(test).map(|s| (s.id, s)).collect();
    for s in samples {
        let members = index.get(s.id).ok_or(Error::UnknownSample(s.id))?;
        let gt_cells = members
            .iter()
            .map(|m| {
                let g = by_id.get(m).ok_or(Error::UnknownSample(*m))?;
                model.future_cell(model.future_cells.contains_key(m).then_some(*m), &g.y)
            })
            .collect::<Result<Vec<_>>>()?;
        let gt_map = stamp_heatmap(&gt_cells, sigma, model.grid_size())?;
        let predicted = model.motionmap(&s.x)?;
        let modes = extract_maxima(&predicted, &model.inference.maxima);
        let overlay = format!("overlay/sample_{:05}.pgm", s.id);
        files.insert(overlay.clone(), heatmap_overlay(&predicted, &gt_map, &modes)?);
        manifest.push(overlay, OVERLAY_ANALOGUE, command);

        let dump = RankedDump {
            sample: s.id,
            action_label: s.action_label.clone(),
            ground_truth: s.y.to_flat(),
            forecasts: model.forecast(&s.x, budget)?,
        };
        let ranked = format!("ranked/sample_{:05}.json", s.id);
        let mut json = serde_json::to_vec_pretty(&dump).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        json.push(b'\n');
        files.insert(ranked.clone(), json);
        manifest.push(ranked, RANKED_ANALOGUE, command);
    }
    Ok((files, manifest))
}

/// Writes rendered exports and their manifest under `dir`.
pub fn write_exports(dir: &Path, files: &ExportFiles, manifest: &FigureManifest) -> Result<()> {
    for (rel, bytes) in files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    manifest.save(&dir.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HeatmapCell;

    #[test]
    fn manifest_check_names_missing_extra_and_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        for f in ["a.tsv", "sub/b.pgm", "config.toml"] {
            std::fs::write(dir.path().join(f), b"x").unwrap();
        }
        let mut m = FigureManifest::default();
        m.push("a.tsv", DENSITY_ANALOGUE, "export");
        m.push("sub/b.pgm", OVERLAY_ANALOGUE, "export");
        m.save(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(check_manifest(&m, dir.path()).unwrap().is_empty());
        assert_eq!(FigureManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap(), m);

        std::fs::remove_file(dir.path().join("a.tsv")).unwrap();
        std::fs::write(dir.path().join("stray.txt"), b"x").unwrap();
        m.push("sub/b.pgm", OVERLAY_ANALOGUE, "export");
        assert_eq!(
            check_manifest(&m, dir.path()).unwrap(),
            vec![
                ManifestMismatch::Missing("a.tsv".into()),
                ManifestMismatch::Extra("stray.txt".into()),
                ManifestMismatch::Duplicate("sub/b.pgm".into()),
            ]
        );
    }

    #[test]
    fn overlay_marks_modes_and_stays_in_range() {
        let p = Heatmap::new(5, vec![1.0; 25]).unwrap();
        let g = Heatmap::zeros(5);
        let mode = Mode {
            cell: HeatmapCell::new(0, 4),
            confidence: 1.0,
        };
        let pgm = heatmap_overlay(&p, &g, &[mode]).unwrap();
        let header = b"P5\n5 5\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let px = &pgm[header.len()..];
        assert_eq!(px.len(), 25);
        assert_eq!(px[4], 255);
        assert_eq!(px[3], 255);
        assert_eq!(px[9], 255);
        assert_eq!(px[0], 100);
    }
}
