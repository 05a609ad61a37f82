//! The run configuration: every tunable of every stage in one TOML document.
//!
//! Unknown keys are rejected at every level. Dotted overrides
//! (`autoencoder.epochs=40`) are applied to the parsed document before it is
//! validated, so they obey the same rules as the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::AutoencoderDims;
use crate::data::{GeneratorConfig, WindowConfig};
use crate::embedding::TsneConfig;
use crate::error::{Error, Result};
use crate::motionmap::HeatmapModelDims;
use crate::nn::AdamConfig;
use crate::pipeline::{EvaluationConfig, InferenceConfig, Protocol};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Threshold on the skeleton-normalized observation distance, meters.
    pub threshold: f64,
    /// Fraction of each label's sequences held out for evaluation.
    pub test_fraction: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub latent: usize,
    pub uncertainty_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent: 128,
            uncertainty_hidden: 128,
            epochs: 60,
            batch_size: 16,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionMapConfig {
    /// Heatmap side length.
    pub m: usize,
    /// Width of the ground-truth Gaussian stamps, in cells.
    pub sigma: f64,
    pub pos_weight: f64,
    pub hidden: usize,
    pub channels: usize,
    pub conv_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for MotionMapConfig {
    fn default() -> Self {
        Self {
            m: 64,
            sigma: 1.5,
            pos_weight: 25.0,
            hidden: 128,
            channels: 16,
            conv_layers: 2,
            epochs: 60,
            batch_size: 16,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Multiplies the autoencoder learning rate.
    pub lr_scale: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub budget: usize,
    pub protocol: Protocol,
    /// Held-out samples covered by per-sample exports.
    pub export_samples: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            budget: 7,
            protocol: Protocol::TrainMined,
            export_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Directory of static UI assets served under `/`, if any.
    pub static_dir: Option<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub window: WindowConfig,
    pub mining: MiningConfig,
    pub autoencoder: AutoencoderConfig,
    pub embedding: TsneConfig,
    pub motionmap: MotionMapConfig,
    pub finetune: FinetuneConfig,
    pub inference: InferenceConfig,
    pub evaluate: EvaluateConfig,
    pub serve: ServeConfig,
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Bare words that are not valid TOML values are taken as strings.
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot separated) in `table` to `raw`, parsed as a TOML value.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidConfig(format!("malformed override key `{path}`")));
    }
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override `{path}`: `{k}` is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// A configuration that trains end to end in well under a second; for
    /// smoke tests, not for meaningful results.
    pub fn smoke() -> Self {
        let mut cfg = RunConfig::default();
        cfg.seed = 5;
        cfg.generator.families = 2;
        cfg.generator.sequences_per_family = 3;
        cfg.generator.idle_frames = 8;
        cfg.generator.idle_jitter = 1;
        cfg.generator.action_frames = 12;
        cfg.window.obs_frames = 4;
        cfg.window.future_frames = 6;
        cfg.window.stride = 4;
        cfg.mining.threshold = 0.02;
        cfg.mining.test_fraction = 0.34;
        cfg.autoencoder.latent = 6;
        cfg.autoencoder.uncertainty_hidden = 6;
        cfg.autoencoder.epochs = 2;
        cfg.embedding.perplexity = 3.0;
        cfg.embedding.iterations = 60;
        cfg.embedding.exaggeration_iterations = 20;
        cfg.motionmap.m = 12;
        cfg.motionmap.hidden = 6;
        cfg.motionmap.channels = 3;
        cfg.motionmap.epochs = 2;
        cfg.finetune.epochs = 1;
        cfg
    }

    /// Parses a TOML document, applies overrides, then validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let w = &self.window;
        if w.obs_frames < crate::data::mining::MATCH_FRAMES || w.future_frames == 0 || w.stride == 0 {
            return Err(Error::InvalidConfig(
                "window needs obs_frames >= 3, future_frames >= 1, stride >= 1".into(),
            ));
        }
        if !(self.mining.threshold >= 0.0) || !(0.0..1.0).contains(&self.mining.test_fraction) {
            return Err(Error::InvalidConfig(
                "mining.threshold must be >= 0 and mining.test_fraction in [0, 1)".into(),
            ));
        }
        let a = &self.autoencoder;
        if a.latent == 0 || a.uncertainty_hidden == 0 || a.batch_size == 0 || !(a.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("autoencoder sizes and learning rate must be positive".into()));
        }
        let m = &self.motionmap;
        if m.m < 4 || !(m.sigma > 0.0) || !(m.pos_weight >= 1.0) || m.hidden == 0 || m.channels == 0 || m.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "motionmap needs m >= 4, sigma > 0, pos_weight >= 1 and positive sizes".into(),
            ));
        }
        if !(self.finetune.lr_scale > 0.0) {
            return Err(Error::InvalidConfig("finetune.lr_scale must be positive".into()));
        }
        let t = &self.inference.maxima.threshold;
        if !(0.0..=1.0).contains(t) || self.inference.maxima.nms_radius == 0 {
            return Err(Error::InvalidConfig(
                "inference.maxima needs threshold in [0, 1] and nms_radius >= 1".into(),
            ));
        }
        if self.evaluate.budget == 0 {
            return Err(Error::InvalidConfig("evaluate.budget must be at least 1".into()));
        }
        Ok(())
    }

    pub fn autoencoder_dims(&self) -> AutoencoderDims {
        AutoencoderDims {
            obs_frames: self.window.obs_frames,
            future_frames: self.window.future_frames,
            joints: self.generator.joints,
            latent: self.autoencoder.latent,
            uncertainty_hidden: self.autoencoder.uncertainty_hidden,
        }
    }

    pub fn heatmap_dims(&self) -> HeatmapModelDims {
        HeatmapModelDims {
            joints: self.generator.joints,
            m: self.motionmap.m,
            hidden: self.motionmap.hidden,
            channels: self.motionmap.channels,
            conv_layers: self.motionmap.conv_layers,
        }
    }

    pub fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn evaluation(&self) -> EvaluationConfig {
        EvaluationConfig {
            budget: self.evaluate.budget,
            sigma: self.motionmap.sigma,
        }
    }

    /// Hash of everything that shapes the trained models; evaluation and
    /// serving settings are excluded so they can change between runs.
    pub fn training_hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.evaluate = EvaluateConfig::default();
        c.serve = ServeConfig::default();
        c.inference = InferenceConfig::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.window.obs_frames, 25);
        assert_eq!(c.mining.threshold, 0.5);
        assert_eq!(c.autoencoder.latent, 128);
        assert_eq!(c.evaluate.budget, 7);
    }

    #[test]
    fn roundtrips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = 99;
        c.embedding.learning_rate = Some(20.0);
        c.serve.static_dir = Some("ui".into());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 3").is_err());
        assert!(RunConfig::from_toml("[autoencoder]\nepoch = 3").is_err());
        assert!(RunConfig::from_toml_with("", &["autoencoder.epoch=3".into()]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_toml_with(
            "[autoencoder]\nepochs = 5",
            &[
                "autoencoder.epochs=9".into(),
                "evaluate.protocol=test-mined".into(),
                "seed = 4".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.autoencoder.epochs, 9);
        assert_eq!(c.evaluate.protocol, Protocol::TestMined);
        assert_eq!(c.seed, 4);
        assert!(RunConfig::from_toml_with("", &["seed".into()]).is_err());
        assert!(RunConfig::from_toml_with("", &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(RunConfig::from_toml("[window]\nobs_frames = 2").is_err());
        assert!(RunConfig::from_toml("[evaluate]\nbudget = 0").is_err());
        assert!(RunConfig::from_toml("[motionmap]\npos_weight = 0.5").is_err());
    }

    #[test]
    fn training_hash_ignores_evaluation() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.evaluate.budget = 3;
        b.serve.port = 1;
        assert_eq!(a.training_hash(), b.training_hash());
        b.autoencoder.epochs += 1;
        assert_ne!(a.training_hash(), b.training_hash());
    }
}
