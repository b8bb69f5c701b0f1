//! Run configuration loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{DEFAULT_RECORDS_PER_IMAGE, DEFAULT_WIDTH};
use crate::error::{Error, Result};
use crate::explain::{DEFAULT_BACKGROUND_THRESHOLD, DEFAULT_TOP_FRACTION};
use crate::flow::FlowSchema;
use crate::metrics::IntervalMetric;
use crate::nn::TrainConfig;
use crate::synth::SynthConfig;
use crate::zoo::{Family, ModelConfig, DEFAULT_PARAM_BUDGET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Flow CSV. When absent the synthetic generator supplies the table.
    pub input: Option<PathBuf>,
    /// Optional JSON schema sidecar; overrides `schema` when set.
    pub schema_file: Option<PathBuf>,
    pub schema: FlowSchema,
    pub synth: SynthConfig,
    /// Grow every class to this many images with noisy copies.
    pub augment_per_class: Option<usize>,
    pub augment_noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            input: None,
            schema_file: None,
            schema: FlowSchema::default(),
            synth: SynthConfig::default(),
            augment_per_class: None,
            augment_noise: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeSection {
    pub width: usize,
    pub records_per_image: usize,
}

impl Default for EncodeSection {
    fn default() -> Self {
        EncodeSection {
            width: DEFAULT_WIDTH,
            records_per_image: DEFAULT_RECORDS_PER_IMAGE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            val_frac: 0.2,
            test_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    /// Identifier in artifacts and reports; defaults to the family name.
    #[serde(default)]
    pub name: Option<String>,
    pub family: Family,
    #[serde(default)]
    pub blocks: Option<usize>,
    #[serde(default = "unit")]
    pub width_multiplier: f64,
    #[serde(default = "head_units")]
    pub head_units: usize,
    #[serde(default = "fraction")]
    pub trainable_fraction: f64,
    #[serde(default = "budget")]
    pub param_budget: usize,
}

fn unit() -> f64 {
    1.0
}
fn head_units() -> usize {
    64
}
fn fraction() -> f64 {
    0.2
}
fn budget() -> usize {
    DEFAULT_PARAM_BUDGET
}

impl ModelEntry {
    pub fn new(family: Family) -> Self {
        ModelEntry {
            name: None,
            family,
            blocks: None,
            width_multiplier: 1.0,
            head_units: head_units(),
            trainable_fraction: fraction(),
            param_budget: budget(),
        }
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.family.name().to_string())
    }

    pub fn model_config(&self, classes: usize, width: usize) -> ModelConfig {
        let mut c = ModelConfig::new(self.family, classes);
        c.blocks = self.blocks;
        c.width_multiplier = self.width_multiplier;
        c.head_units = self.head_units;
        c.trainable_fraction = self.trainable_fraction;
        c.param_budget = self.param_budget;
        c.input = [crate::codec::CHANNELS, width, width];
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    /// Test images explained per class.
    pub samples_per_class: usize,
    pub shap_budget: usize,
    /// Side of the square SHAP superpixels, in pixels.
    pub shap_cell: usize,
    pub top_fraction: f64,
    pub background_threshold: f64,
    /// Grad-CAM tap layer name; defaults to the map feeding global pooling.
    pub tap: Option<String>,
    /// Overlay PNGs written per model.
    pub overlays: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            samples_per_class: 5,
            shap_budget: 256,
            shap_cell: 10,
            top_fraction: DEFAULT_TOP_FRACTION,
            background_threshold: DEFAULT_BACKGROUND_THRESHOLD,
            tap: None,
            overlays: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub trials: usize,
    pub threads: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { trials: 5, threads: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; loading copies it into the synthetic and training seeds.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub encode: EncodeSection,
    pub split: SplitSection,
    pub models: Vec<ModelEntry>,
    pub train: TrainConfig,
    pub interval_metric: IntervalMetric,
    pub explain: ExplainSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            data: DataSection::default(),
            encode: EncodeSection::default(),
            split: SplitSection::default(),
            models: vec![ModelEntry::new(Family::MicroMobile), ModelEntry::new(Family::MicroDense)],
            train: TrainConfig::default(),
            interval_metric: IntervalMetric::default(),
            explain: ExplainSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    /// Applies the global seed to the synthetic generator and the trainer.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Some(p) = &self.data.input {
            if !p.is_file() {
                problems.push(format!("input {} does not exist", p.display()));
            }
        } else if let Err(Error::Config(m)) = self.data.synth.validate() {
            problems.push(format!("synth: {m}"));
        }
        if let Some(p) = &self.data.schema_file {
            if !p.is_file() {
                problems.push(format!("schema file {} does not exist", p.display()));
            }
        }
        if self.data.augment_per_class == Some(0) {
            problems.push("augment_per_class must be positive".into());
        }
        if !(self.data.augment_noise >= 0.0 && self.data.augment_noise.is_finite()) {
            problems.push(format!("augment_noise {} is invalid", self.data.augment_noise));
        }
        if self.encode.width == 0 || self.encode.width > u16::MAX as usize {
            problems.push(format!("encode width {} is out of range", self.encode.width));
        }
        if self.encode.records_per_image == 0 || self.encode.records_per_image % 3 != 0 {
            problems.push(format!(
                "records_per_image {} must be a positive multiple of 3",
                self.encode.records_per_image
            ));
        } else if self.encode.records_per_image / 3 != self.encode.width {
            problems.push(format!(
                "records_per_image / 3 = {} must equal width {} for square images",
                self.encode.records_per_image / 3,
                self.encode.width
            ));
        }
        let frac_ok = |f: f64| f > 0.0 && f < 1.0;
        if !frac_ok(self.split.val_frac) || !frac_ok(self.split.test_frac) {
            problems.push(format!(
                "split fractions {} / {} must lie in (0, 1)",
                self.split.val_frac, self.split.test_frac
            ));
        }
        if self.models.is_empty() {
            problems.push("no models configured".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, m) in self.models.iter().enumerate() {
            let name = m.name();
            if !names.insert(name.clone()) {
                problems.push(format!("model name {name} is used twice"));
            }
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                problems.push(format!("model {i}: name {name:?} must be [A-Za-z0-9_-]+"));
            }
            if let Err(Error::Config(msg)) = m.model_config(2, self.encode.width).validate() {
                problems.push(format!("model {name}: {msg}"));
            }
        }
        if let Err(Error::Config(m)) = self.train.validate() {
            problems.push(format!("train: {m}"));
        }
        let e = &self.explain;
        if e.samples_per_class == 0 {
            problems.push("explain.samples_per_class must be positive".into());
        }
        if e.shap_cell == 0 || self.encode.width % e.shap_cell != 0 {
            problems.push(format!("explain.shap_cell {} must divide width {}", e.shap_cell, self.encode.width));
        } else {
            let regions = (self.encode.width / e.shap_cell).pow(2);
            if e.shap_budget < regions + 2 {
                problems.push(format!(
                    "explain.shap_budget {} is below regions + 2 = {}",
                    e.shap_budget,
                    regions + 2
                ));
            }
        }
        if !(e.top_fraction > 0.0 && e.top_fraction <= 1.0) {
            problems.push(format!("explain.top_fraction {} must lie in (0, 1]", e.top_fraction));
        }
        if !(0.0..=1.0).contains(&e.background_threshold) {
            problems.push(format!(
                "explain.background_threshold {} must lie in [0, 1]",
                e.background_threshold
            ));
        }
        if self.bench.trials < crate::bench::MIN_TRIALS {
            problems.push(format!(
                "bench.trials {} is below {}",
                self.bench.trials,
                crate::bench::MIN_TRIALS
            ));
        }
        if self.bench.threads == 0 {
            problems.push("bench.threads must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON form.
    /// Digest of every setting except the output directory, so identical
    /// runs in different directories stamp identical artifacts.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn model(&self, name: &str) -> Result<&ModelEntry> {
        self.models
            .iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("no configured model named {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_parse_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn every_problem_reported() {
        let text = r#"
            [split]
            val_frac = 1.5
            [train]
            epochs = 0
            [bench]
            trials = 1
        "#;
        let c = RunConfig::from_toml_str(text).unwrap();
        match c.validate() {
            Err(Error::Config(m)) => {
                assert!(m.contains("split fractions"), "{m}");
                assert!(m.contains("train:"), "{m}");
                assert!(m.contains("bench.trials"), "{m}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected_and_seed_applied() {
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        let c = RunConfig::default().with_seed(9);
        assert_eq!((c.seed, c.data.synth.seed, c.train.seed), (9, 9, 9));
        assert_ne!(c.hash(), RunConfig::default().hash());
    }
}
