//! Experiment configuration: JSON schema, validation and dotted overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attack::RevEngBudget;
use crate::data::{DatasetSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig};
use crate::passgen::PassportType;
use crate::passport::PassportKind;
use crate::train::{InitMode, Schedule, TrainConfig};
use crate::verify::{VerdictThresholds, DEFAULT_CURVE_GRID, DEFAULT_CURVE_SEEDS};

fn default_widths() -> Vec<usize> {
    vec![16, 32]
}

fn default_true() -> bool {
    true
}

/// Architecture; channels, image size and classes come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_arch")]
    pub arch: Arch,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    pub passport: PassportKind,
    #[serde(default = "default_true")]
    pub normalize_input: bool,
}

fn default_arch() -> Arch {
    Arch::MiniNet
}

fn default_candidates() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassportSection {
    pub passport_type: PassportType,
    /// Candidate passports per layer for random-image passports.
    #[serde(default = "default_candidates")]
    pub num_candidates: usize,
}

/// Owner training; the seed is derived from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub telemetry: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            schedule: t.schedule,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            telemetry: true,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            schedule: self.schedule.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            init_mode: InitMode::FromScratch,
            seed,
            telemetry: self.telemetry,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub t1_trials: usize,
    pub t2_trials: usize,
    pub t3_trials: usize,
    pub reveng_trials: usize,
    pub reveng: RevEngBudget,
    /// Histogram bin width in accuracy points.
    pub histogram_bin_width: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            t1_trials: 200,
            t2_trials: 20,
            t3_trials: 20,
            reveng_trials: 1,
            reveng: RevEngBudget::default(),
            histogram_bin_width: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub thresholds: VerdictThresholds,
    pub curve_grid: Vec<f64>,
    pub curve_seeds: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            thresholds: VerdictThresholds::default(),
            curve_grid: DEFAULT_CURVE_GRID.to_vec(),
            curve_seeds: DEFAULT_CURVE_SEEDS,
        }
    }
}

/// Everything one protection run needs. All randomness flows from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSection,
    pub passport: PassportSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Also train the passport-free twin and record its accuracy.
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub attacks: AttackSection,
    #[serde(default)]
    pub verify: VerifySection,
}

impl ExperimentConfig {
    /// The toy setup: 10-class synthetic task, MiniNet, random-image passports.
    pub fn toy(kind: PassportKind, seed: u64) -> Self {
        Self {
            seed,
            dataset: DatasetSpec::Synthetic(SyntheticSpec::new(10, 200, 16, 7)),
            model: ModelSection {
                arch: Arch::MiniNet,
                widths: default_widths(),
                passport: kind,
                normalize_input: true,
            },
            passport: PassportSection {
                passport_type: PassportType::RandomImage,
                num_candidates: default_candidates(),
            },
            train: TrainSection::default(),
            baseline: true,
            attacks: AttackSection::default(),
            verify: VerifySection::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key.path=value` overrides, re-checking the whole schema.
    ///
    /// The value is parsed as JSON when possible and taken as a string
    /// otherwise. The key must name an existing field.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut v, o.as_ref())?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            if s.classes == 0 || s.samples_per_class == 0 || s.image_size == 0 {
                return bad("synthetic dataset needs classes, samples and size".into());
            }
            if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) || s.noise.is_nan() || s.noise < 0.0 {
                return bad("test_fraction must be in (0, 1) and noise >= 0".into());
            }
        }
        if self.model.widths.contains(&0) {
            return bad("widths must be positive".into());
        }
        if self.passport.num_candidates == 0 {
            return bad("num_candidates must be at least 1".into());
        }
        self.train.to_train_config(0).validate()?;
        if self.train.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        let a = &self.attacks;
        if a.reveng.epochs == 0 || a.reveng.batch_size == 0 || a.reveng.lr.is_nan() || a.reveng.lr < 0.0 {
            return bad("reveng budget needs epochs >= 1, batch_size >= 1, lr >= 0".into());
        }
        if !(a.histogram_bin_width > 0.0 && a.histogram_bin_width <= 100.0) {
            return bad("histogram_bin_width must be in (0, 100]".into());
        }
        self.verify.thresholds.validate()?;
        let g = &self.verify.curve_grid;
        if g.first() != Some(&0.0) || g.windows(2).any(|w| w[0] >= w[1]) || g.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad(format!("curve_grid {g:?} must ascend strictly from 0 within [0, 1]"));
        }
        if self.verify.curve_seeds == 0 {
            return bad("curve_seeds must be at least 1".into());
        }
        Ok(())
    }

    /// Model config of the protected network for a dataset of this shape.
    pub fn model_config(&self, in_channels: usize, image_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            arch: self.model.arch.clone(),
            in_channels,
            image_size,
            num_classes,
            widths: self.model.widths.clone(),
            passport: Some(self.model.passport),
            normalize_input: self.model.normalize_input,
        }
    }
}

/// Sets the field at a dotted path inside a JSON document.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {part:?} is not inside an object")))?;
        let child = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("override key {key:?}: unknown field {part:?}")))?;
        if i + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    unreachable!("split yields at least one part")
}
