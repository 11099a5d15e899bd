//! Run configuration: a TOML schema with defaults matching the reference
//! training recipe, validation that reports every violated invariant at
//! once, and a content hash that every run artifact embeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{AdversaryConfig, BackboneKind};
use crate::attacks;
use crate::Result;

/// Which step routine drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Learned sequential adversary in the loop.
    Cat,
    /// Uniformly sampled attacks, compute-matched to `Cat`.
    Random,
    /// No attacks; plain supervised watermark training.
    Noaug,
    /// Bandit adversary: per-arm upper confidence bounds, no gradients.
    Ucb,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Cat => "cat",
            Mode::Random => "random",
            Mode::Noaug => "noaug",
            Mode::Ucb => "ucb",
        }
    }
}

/// Frozen encoder variant for the adversary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    TinyConv,
    ResnetStyle,
}

impl Backbone {
    pub fn kind(self) -> BackboneKind {
        match self {
            Backbone::TinyConv => BackboneKind::TinyConv,
            Backbone::ResnetStyle => BackboneKind::ResNetStyle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    ImageDirectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Smooth,
    Textured,
}

impl Style {
    pub fn synthetic(self) -> crate::data::SyntheticStyle {
        match self {
            Style::Smooth => crate::data::SyntheticStyle::Smooth,
            Style::Textured => crate::data::SyntheticStyle::Textured,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Image directory, used only when `kind = "image_directory"`.
    pub path: String,
    /// Number of generated images, used only when `kind = "synthetic"`.
    pub size: usize,
    /// Square image side in pixels.
    pub resolution: usize,
    pub style: Style,
    /// Train/val/test fractions; must sum to 1.
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: String::new(),
            size: 512,
            resolution: 32,
            style: Style::Textured,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Message length d_m in bits.
    pub payload_bits: usize,
    /// Base channel width of embedder and extractor.
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { payload_bits: 16, width: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    /// Peak learning rate after warmup.
    pub lr: f64,
    /// Cosine decay floor.
    pub lr_floor: f64,
    /// Epochs of linear lr warmup; attacks stay off for their duration.
    pub warmup_epochs: usize,
    /// Weight of the message loss.
    pub lambda_dec: f64,
    /// Weight of the perceptual loss.
    pub lambda_i: f64,
    pub weight_decay: f64,
    pub mode: Mode,
    /// Checkpoint cadence in epochs (the final epoch always checkpoints).
    pub checkpoint_every: usize,
    /// Exploration constant of the bandit mode.
    pub ucb_c: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            steps_per_epoch: 100,
            batch_size: 32,
            grad_accum: 1,
            lr: 5e-4,
            lr_floor: 1e-6,
            warmup_epochs: 5,
            lambda_dec: 1.0,
            lambda_i: 0.1,
            weight_decay: 0.0,
            mode: Mode::Cat,
            checkpoint_every: 10,
            ucb_c: std::f64::consts::SQRT_2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySection {
    /// Attack depth T.
    pub depth: usize,
    pub tau: f64,
    pub tau_ent: f64,
    pub lambda_ent: f64,
    pub d_h: usize,
    pub backbone: Backbone,
}

impl Default for AdversarySection {
    fn default() -> Self {
        Self {
            depth: 2,
            tau: 1.0,
            tau_ent: 1.0,
            lambda_ent: 0.1,
            d_h: 384,
            backbone: Backbone::TinyConv,
        }
    }
}

impl AdversarySection {
    pub fn to_adversary_config(&self) -> AdversaryConfig {
        AdversaryConfig {
            depth: self.depth,
            tau: self.tau,
            tau_ent: self.tau_ent,
            lambda_ent: self.lambda_ent,
            d_h: self.d_h,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Watermarked samples per grid cell.
    pub samples: usize,
    /// Single-step parameter grid per primitive id.
    pub single: BTreeMap<String, Vec<f64>>,
    /// Reduced per-primitive grid used inside ordered pairs.
    pub pair: BTreeMap<String, Vec<f64>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            single: default_single_grid(),
            pair: default_pair_grid(),
        }
    }
}

fn grid(entries: &[(&str, &[f64])]) -> BTreeMap<String, Vec<f64>> {
    entries.iter().map(|&(id, vs)| (id.to_string(), vs.to_vec())).collect()
}

/// Full per-primitive evaluation grid (single-step mode).
pub fn default_single_grid() -> BTreeMap<String, Vec<f64>> {
    grid(&[
        ("rotate", &[5.0, 10.0, 30.0, 45.0, 90.0]),
        ("resize", &[0.32, 0.45, 0.55, 0.63, 0.71, 0.77, 0.84, 0.89, 0.95, 1.00]),
        ("crop", &[0.32, 0.45, 0.55, 0.63, 0.71, 0.77, 0.84, 0.89, 0.95, 1.00]),
        ("perspective", &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]),
        ("hflip", &[0.0, 1.0]),
        ("brightness", &[0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]),
        ("contrast", &[0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]),
        ("hue", &[-0.4, -0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5]),
        ("grayscale", &[0.0, 1.0]),
        ("gaussian_blur", &[3.0, 5.0, 9.0, 13.0, 17.0]),
        ("jpeg", &[40.0, 50.0, 60.0, 70.0, 80.0, 90.0]),
    ])
}

/// Reduced per-primitive grid for compositional pairs. Binary toggles keep
/// only their active setting.
pub fn default_pair_grid() -> BTreeMap<String, Vec<f64>> {
    grid(&[
        ("rotate", &[5.0, 10.0]),
        ("resize", &[0.71, 0.77, 0.84, 0.89]),
        ("crop", &[0.71, 0.77, 0.84, 0.89]),
        ("perspective", &[0.1, 0.2, 0.3, 0.4]),
        ("hflip", &[1.0]),
        ("brightness", &[0.5, 0.75, 1.25, 1.5]),
        ("contrast", &[0.5, 0.75, 1.25, 1.5]),
        ("hue", &[-0.3, -0.2, -0.1, 0.1, 0.2, 0.3]),
        ("grayscale", &[1.0]),
        ("gaussian_blur", &[3.0, 5.0, 9.0]),
        ("jpeg", &[60.0, 70.0, 80.0]),
    ])
}

/// Complete run configuration. Every field has a default, so an empty file
/// is a valid config.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adversary: AdversarySection,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses, fills defaults, and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| crate::Error::ParseError(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| crate::Error::ParseError(e.to_string()))
    }

    /// SHA-256 over the resolved config; identical configs hash identically
    /// and any field change changes the hash.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short hash for file names and log lines.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn total_steps(&self) -> usize {
        self.train.epochs * self.train.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.train.warmup_epochs * self.train.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let t = &self.train;

        if t.epochs == 0 {
            issues.push("train.epochs must be positive".into());
        }
        if t.steps_per_epoch == 0 {
            issues.push("train.steps_per_epoch must be positive".into());
        }
        if t.batch_size == 0 {
            issues.push("train.batch_size must be positive".into());
        }
        if t.grad_accum == 0 {
            issues.push("train.grad_accum must be positive".into());
        }
        if t.batch_size % t.grad_accum != 0 {
            issues.push(format!(
                "train.grad_accum ({}) must divide train.batch_size ({})",
                t.grad_accum, t.batch_size
            ));
        }
        if !(t.lr > 0.0) {
            issues.push(format!("train.lr must be positive, got {}", t.lr));
        }
        if !(t.lr_floor >= 0.0 && t.lr_floor < t.lr) {
            issues.push(format!(
                "train.lr_floor must sit in [0, lr): floor {}, lr {}",
                t.lr_floor, t.lr
            ));
        }
        if t.warmup_epochs >= t.epochs {
            issues.push(format!(
                "train.warmup_epochs ({}) must be below train.epochs ({})",
                t.warmup_epochs, t.epochs
            ));
        }
        if !(t.lambda_dec > 0.0) {
            issues.push(format!("train.lambda_dec must be positive, got {}", t.lambda_dec));
        }
        if t.lambda_i < 0.0 {
            issues.push(format!("train.lambda_i must be nonnegative, got {}", t.lambda_i));
        }
        if t.weight_decay < 0.0 {
            issues.push(format!("train.weight_decay must be nonnegative, got {}", t.weight_decay));
        }
        if t.checkpoint_every == 0 {
            issues.push("train.checkpoint_every must be positive".into());
        }
        if t.ucb_c < 0.0 {
            issues.push(format!("train.ucb_c must be nonnegative, got {}", t.ucb_c));
        }

        if let Err(crate::Error::ValidationError { issues: adv }) =
            self.adversary.to_adversary_config().validate()
        {
            issues.extend(adv.into_iter().map(|i| format!("adversary.{i}")));
        }

        let d = &self.dataset;
        if d.resolution < 8 {
            issues.push(format!("dataset.resolution must be at least 8, got {}", d.resolution));
        }
        match d.kind {
            DatasetKind::Synthetic => {
                if d.size < 3 {
                    issues.push(format!("dataset.size must be at least 3, got {}", d.size));
                }
            }
            DatasetKind::ImageDirectory => {
                if d.path.is_empty() {
                    issues.push("dataset.path required for image_directory".into());
                }
            }
        }
        let split_sum: f64 = d.split.iter().sum();
        if d.split.iter().any(|&f| f <= 0.0) || (split_sum - 1.0).abs() > 1e-6 {
            issues.push(format!(
                "dataset.split fractions must be positive and sum to 1, got {:?}",
                d.split
            ));
        }

        if self.model.payload_bits == 0 {
            issues.push("model.payload_bits must be positive".into());
        }
        if self.model.width < 4 {
            issues.push(format!("model.width must be at least 4, got {}", self.model.width));
        }

        if self.eval.samples == 0 {
            issues.push("eval.samples must be positive".into());
        }
        for (section, map) in [("single", &self.eval.single), ("pair", &self.eval.pair)] {
            for (id, values) in map {
                let prim = match attacks::by_id(id) {
                    Ok(p) => p,
                    Err(_) => {
                        issues.push(format!("eval.{section}: unknown primitive \"{id}\""));
                        continue;
                    }
                };
                if values.is_empty() {
                    issues.push(format!("eval.{section}.{id}: empty grid"));
                }
                for &v in values {
                    if !prim.range.contains(v) {
                        issues.push(format!(
                            "eval.{section}.{id}: value {v} outside valid range"
                        ));
                    }
                }
            }
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::ValidationError { issues })
        }
    }

    /// Builds the configured dataset.
    pub fn build_dataset(&self, device: &candle_core::Device) -> Result<crate::data::Dataset> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => crate::data::Dataset::synthetic_with_split(
                d.size,
                d.resolution,
                d.style.synthetic(),
                self.seed,
                d.split,
                device,
            ),
            DatasetKind::ImageDirectory => crate::data::Dataset::from_dir_with_split(
                Path::new(&d.path),
                d.resolution,
                self.seed,
                d.split,
                device,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_carries_the_paper_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.adversary.lambda_ent, 0.1);
        assert_eq!(c.adversary.tau, 1.0);
        assert_eq!(c.adversary.tau_ent, 1.0);
        assert_eq!(c.adversary.d_h, 384);
        assert_eq!(c.adversary.depth, 2);
        assert_eq!(c.train.lambda_dec, 1.0);
        assert_eq!(c.train.lambda_i, 0.1);
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.train.lr_floor, 1e-6);
        assert_eq!(c.train.warmup_epochs, 5);
        assert_eq!(c.model.payload_bits, 16);
        assert_eq!(crate::watermark::ALPHA_START, 1.0);
        assert_eq!(crate::watermark::ALPHA_END, 0.2);
    }

    #[test]
    fn default_grids_match_the_published_table() {
        let c = RunConfig::default();
        assert_eq!(c.eval.single["rotate"], vec![5.0, 10.0, 30.0, 45.0, 90.0]);
        assert_eq!(c.eval.single["jpeg"], vec![40.0, 50.0, 60.0, 70.0, 80.0, 90.0]);
        assert_eq!(c.eval.pair["rotate"], vec![5.0, 10.0]);
        assert_eq!(c.eval.pair["jpeg"], vec![60.0, 70.0, 80.0]);
        assert_eq!(c.eval.pair["hflip"], vec![1.0]);

        // Eleven non-identity primitives carry grids in both modes.
        assert_eq!(c.eval.single.len(), 11);
        assert_eq!(c.eval.pair.len(), 11);
        let pair_values: usize = c.eval.pair.values().map(|v| v.len()).sum();
        assert_eq!(pair_values, 36);
    }

    #[test]
    fn validation_collects_all_issues() {
        let mut c = RunConfig::default();
        c.adversary.lambda_ent = -0.5;
        c.train.warmup_epochs = c.train.epochs;
        c.train.lr_floor = 1.0;
        match c.validate() {
            Err(crate::Error::ValidationError { issues }) => {
                assert!(issues.len() >= 3, "expected 3+ issues, got {issues:?}");
                assert!(issues.iter().any(|i| i.contains("lambda_ent")));
                assert!(issues.iter().any(|i| i.contains("warmup")));
                assert!(issues.iter().any(|i| i.contains("lr_floor")));
            }
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn negative_lambda_ent_is_rejected_from_toml() {
        let err = RunConfig::from_toml("[adversary]\nlambda_ent = -0.1\n");
        assert!(matches!(err, Err(crate::Error::ValidationError { .. })));
    }

    #[test]
    fn unknown_fields_fail_parsing_with_the_field_named() {
        let err = RunConfig::from_toml("[train]\nlerning_rate = 0.1\n");
        match err {
            Err(crate::Error::ParseError(msg)) => {
                assert!(msg.contains("lerning_rate"), "message lacks field name: {msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn grid_values_are_checked_against_the_registry() {
        let text = "[eval.single]\njpeg = [40.0, 41.0]\n";
        match RunConfig::from_toml(text) {
            Err(crate::Error::ValidationError { issues }) => {
                assert!(issues.iter().any(|i| i.contains("jpeg") && i.contains("41")));
            }
            other => panic!("expected validation failure, got {other:?}"),
        }

        let text = "[eval.pair]\nspeckle = [1.0]\n";
        match RunConfig::from_toml(text) {
            Err(crate::Error::ValidationError { issues }) => {
                assert!(issues.iter().any(|i| i.contains("speckle")));
            }
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn hash_is_stable_and_field_sensitive() {
        let a = RunConfig::from_toml("seed = 3\n").unwrap();
        let b = RunConfig::from_toml("seed = 3\n").unwrap();
        assert_eq!(a.hash(), b.hash());

        let c = RunConfig::from_toml("seed = 4\n").unwrap();
        assert_ne!(a.hash(), c.hash());

        let mut d = RunConfig::from_toml("seed = 3\n").unwrap();
        d.train.lambda_i = 0.2;
        assert_ne!(a.hash(), d.hash());
        assert_eq!(a.short_hash().len(), 12);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let a = RunConfig::default();
        let text = a.to_toml().unwrap();
        let b = RunConfig::from_toml(&text).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn mode_and_backbone_spellings() {
        let c = RunConfig::from_toml(
            "[train]\nmode = \"ucb\"\n\n[adversary]\nbackbone = \"resnet_style\"\n",
        )
        .unwrap();
        assert_eq!(c.train.mode, Mode::Ucb);
        assert_eq!(c.adversary.backbone, Backbone::ResnetStyle);
    }

    #[test]
    fn synthetic_dataset_builds_from_config() {
        let mut c = RunConfig::default();
        c.dataset.size = 20;
        c.dataset.resolution = 8;
        let ds = c.build_dataset(&candle_core::Device::Cpu).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.train_len(), 16);
        assert_eq!(ds.val_len(), 2);
        assert_eq!(ds.test_len(), 2);
    }
}
