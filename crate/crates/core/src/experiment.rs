//! End-to-end protection runs: data, baseline, passport, training, metrics.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::attack::{
    fake_passport_attack, reverse_engineer_hidden, AttackConfig, AttackKind, AttackReport, AttackTarget,
};
use crate::config::ExperimentConfig;
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::passgen::{
    gen_feature_map_passport, gen_random_pattern, images_per_candidate, FeatureMode, PassportSet, PassportType,
};
use crate::passport::PassportKind;
use crate::rng::{derive_seed, substream};
use crate::tensor::Tensor;
use crate::train::{evaluate_accuracy, init_weights, train, InitMode, TelemetryLog};
use crate::verify::{compute_inconsistency, ProtectionRecord};

/// Seed of a named stage of the run.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    derive_seed(seed, stage)
}

/// Accuracies and hashes that identify a finished protection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub kind: PassportKind,
    pub passport_type: PassportType,
    pub a_o: Option<f64>,
    pub a_p: f64,
    pub inconsistency: Option<f64>,
    pub chance_level: f64,
    pub split_hash: String,
    pub model_hash: String,
    pub passport_hash: String,
    pub final_loss: f64,
}

pub struct ProtectedRun {
    pub dataset: Dataset,
    /// Passport-free twin; also the reference network of feature-map passports.
    pub baseline: Option<Model>,
    pub model: Model,
    pub passport: PassportSet,
    pub telemetry: TelemetryLog,
    pub metrics: RunMetrics,
}

impl ProtectedRun {
    pub fn target(&self) -> AttackTarget<'_> {
        AttackTarget {
            model: &self.model,
            passport: &self.passport,
            dataset: &self.dataset,
            reference: self.baseline.as_ref(),
        }
    }

    /// Signature curve and accuracy recorded at protection time.
    pub fn protection_record(&self, cfg: &ExperimentConfig) -> Result<ProtectionRecord> {
        ProtectionRecord::measure(
            &self.model,
            &self.passport,
            &self.dataset.test,
            &cfg.verify.curve_grid,
            cfg.verify.curve_seeds,
            stage_seed(cfg.seed, "curve"),
        )
    }

    /// Runs one attack with the trial count and budget from `cfg`.
    pub fn attack(&self, cfg: &ExperimentConfig, kind: AttackKind) -> Result<AttackReport> {
        let a = &cfg.attacks;
        let trials = match kind {
            AttackKind::FakeT1 => a.t1_trials,
            AttackKind::FakeT2 => a.t2_trials,
            AttackKind::FakeT3 => a.t3_trials,
            AttackKind::RevEng => a.reveng_trials,
        };
        let mut ac = AttackConfig::new(kind, trials, stage_seed(cfg.seed, &format!("attack/{}", kind.name())));
        ac.budget = a.reveng.clone();
        match kind {
            AttackKind::RevEng => reverse_engineer_hidden(&self.target(), &ac).map(|(_, r)| r),
            _ => fake_passport_attack(&self.target(), &ac),
        }
    }
}

/// Trains the passport-free twin with the owner's budget.
pub fn train_baseline(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Model> {
    let [c, h, _] = ds.image_shape();
    let mut mc = cfg.model_config(c, h, ds.num_classes);
    mc.passport = None;
    let mut base = Model::new(mc)?;
    let seed = stage_seed(cfg.seed, "train");
    init_weights(&mut base, InitMode::FromScratch, seed, None)?;
    let tc = cfg.train.to_train_config(seed);
    train(&mut base, None, &ds.train, None, &tc, None)?;
    Ok(base)
}

/// Draws the source images of a feature-map passport from the train split.
fn source_images(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(Vec<Tensor>, Vec<String>)> {
    let r = images_per_candidate(cfg.model.passport);
    let count = match cfg.passport.passport_type {
        PassportType::FixedImage => r,
        _ => r * cfg.passport.num_candidates,
    };
    if count > ds.train.len() {
        return Err(Error::Config(format!(
            "{count} passport images requested, train split has {}",
            ds.train.len()
        )));
    }
    let mut rng = substream(stage_seed(cfg.seed, "passport"), "source-images");
    let idx = sample(&mut rng, ds.train.len(), count).into_vec();
    let ids: Vec<String> = idx.iter().map(|&i| Dataset::image_id("train", i)).collect();
    let images = idx
        .iter()
        .map(|&i| ds.train.images.batch_item(i))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, ids))
}

/// Generates the owner's passport for `model`.
pub fn make_passport(
    cfg: &ExperimentConfig,
    model: &Model,
    reference: Option<&Model>,
    ds: &Dataset,
) -> Result<PassportSet> {
    let seed = stage_seed(cfg.seed, "passport");
    let mode = match cfg.passport.passport_type {
        PassportType::RandomPattern => return gen_random_pattern(model, seed),
        PassportType::FixedImage => FeatureMode::Fixed,
        PassportType::RandomImage => FeatureMode::Random,
    };
    let reference =
        reference.ok_or_else(|| Error::Passport("feature-map passports need a reference network".into()))?;
    let (images, ids) = source_images(cfg, ds)?;
    gen_feature_map_passport(model, reference, &images, &ids, mode, seed)
}

/// Trains a protected network from scratch, plus the baseline when asked
/// for or needed as the reference network.
pub fn run_protection(cfg: &ExperimentConfig) -> Result<ProtectedRun> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let needs_reference = cfg.passport.passport_type != PassportType::RandomPattern;
    let baseline = if cfg.baseline || needs_reference {
        Some(train_baseline(cfg, &ds)?)
    } else {
        None
    };
    protect_with(cfg, ds, baseline)
}

/// Like [`run_protection`] with the dataset and a baseline already at hand.
/// The baseline must come from [`train_baseline`] with the same config
/// apart from the passport kind.
pub fn protect_with(cfg: &ExperimentConfig, ds: Dataset, baseline: Option<Model>) -> Result<ProtectedRun> {
    cfg.validate()?;
    let [c, h, _] = ds.image_shape();
    let mut model = Model::new(cfg.model_config(c, h, ds.num_classes))?;
    let seed = stage_seed(cfg.seed, "train");
    init_weights(&mut model, InitMode::FromScratch, seed, None)?;
    let passport = make_passport(cfg, &model, baseline.as_ref(), &ds)?;
    let tc = cfg.train.to_train_config(seed);
    let report = train(&mut model, Some(&passport), &ds.train, Some(&ds.test), &tc, None)?;
    let a_p = evaluate_accuracy(&model, &ds.test, Some(&passport))?;
    let a_o = match (&baseline, cfg.baseline) {
        (Some(b), true) => Some(evaluate_accuracy(b, &ds.test, None)?),
        _ => None,
    };
    let metrics = RunMetrics {
        seed: cfg.seed,
        kind: cfg.model.passport,
        passport_type: cfg.passport.passport_type,
        a_o,
        a_p,
        inconsistency: a_o.map(|a_o| compute_inconsistency(a_o, a_p)).transpose()?,
        chance_level: ds.chance_level(),
        split_hash: ds.split_hash.clone(),
        model_hash: model.content_hash(),
        passport_hash: passport.content_hash()?,
        final_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
    };
    Ok(ProtectedRun {
        dataset: ds,
        baseline,
        model,
        passport,
        telemetry: report.telemetry,
        metrics,
    })
}
