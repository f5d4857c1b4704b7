//! Fake-passport and reverse-engineering attacks.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, UnitNorm};
use crate::passgen::{gen_random_pattern, FeatureBank, PassportSet, PassportType};
use crate::rng::{derive_seed, substream};
use crate::train::{evaluate_accuracy, train, InitMode, Schedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Fresh uniform random patterns.
    FakeT1,
    /// The true passport's structure with each source image replaced by a
    /// held-out image of the same class.
    FakeT2,
    /// A wrong per-layer combination of the true candidate images.
    FakeT3,
    /// Retrain free scale/shift vectors on top of frozen cloned weights.
    RevEng,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::FakeT1 => "t1",
            AttackKind::FakeT2 => "t2",
            AttackKind::FakeT3 => "t3",
            AttackKind::RevEng => "reveng",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" | "fake_t1" => Ok(AttackKind::FakeT1),
            "t2" | "fake_t2" => Ok(AttackKind::FakeT2),
            "t3" | "fake_t3" => Ok(AttackKind::FakeT3),
            "reveng" | "rev_eng" => Ok(AttackKind::RevEng),
            _ => Err(Error::Config(format!("unknown attack kind {s:?}"))),
        }
    }
}

/// Optimizer budget of the reverse-engineering attack. The default matches
/// the owner's default training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevEngBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
}

impl Default for RevEngBudget {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            schedule: Schedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub num_trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub budget: RevEngBudget,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, num_trials: usize, seed: u64) -> Self {
        Self {
            kind,
            num_trials,
            seed,
            budget: RevEngBudget::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_trials == 0 {
            return Err(Error::Config("num_trials must be at least 1".into()));
        }
        if self.kind == AttackKind::RevEng && self.budget.epochs == 0 {
            return Err(Error::Config("reverse engineering needs at least one epoch".into()));
        }
        Ok(())
    }
}

/// Attacked accuracies of every trial and their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub accuracies: Vec<f64>,
    /// Accuracy with the true passport.
    pub valid_accuracy: f64,
    pub mean: f64,
    pub std: f64,
    /// Mean protection strength, valid minus attacked accuracy.
    pub strength: f64,
    /// Excluded from serialized output so reports stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl AttackReport {
    pub fn new(kind: AttackKind, accuracies: Vec<f64>, valid_accuracy: f64, wall_time_secs: f64) -> Self {
        let (mean, std) = mean_std(&accuracies);
        let strengths: Vec<f64> = accuracies.iter().map(|a| valid_accuracy - a).collect();
        Self {
            kind,
            strength: mean_std(&strengths).0,
            accuracies,
            valid_accuracy,
            mean,
            std,
            wall_time_secs,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trial_id,accuracy\n");
        for (i, a) in self.accuracies.iter().enumerate() {
            let _ = writeln!(s, "{i},{a}");
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "trials": self.accuracies.len(),
            "mean": self.mean,
            "std": self.std,
            "A_p": self.valid_accuracy,
            "S": self.strength,
        })
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// What the attacker and the evaluation have access to.
pub struct AttackTarget<'a> {
    pub model: &'a Model,
    /// The owner's passport, used to report the valid accuracy and to
    /// exclude the true combination in T3.
    pub passport: &'a PassportSet,
    pub dataset: &'a Dataset,
    /// Network that turns attacker images into feature-map passports (T2, T3).
    pub reference: Option<&'a Model>,
}

/// Worker count from `NNPP_THREADS`, defaulting to available cores.
pub fn worker_count() -> usize {
    std::env::var("NNPP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `0..n` on up to `threads` workers; results keep index order.
pub fn parallel_map<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<Result<R>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        for (t, chunk) in slots.chunks_mut(n.div_ceil(threads)).enumerate() {
            let base = t * n.div_ceil(threads);
            scope.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(base + i));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

fn feature_bank(target: &AttackTarget<'_>, ids: &[String]) -> Result<FeatureBank> {
    let reference = target
        .reference
        .ok_or_else(|| Error::Attack("feature-map attacks need a reference network".into()))?;
    let images = ids
        .iter()
        .map(|id| target.dataset.image_by_id(id).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    FeatureBank::build(target.model, reference, &images, ids)
}

/// Runs `cfg.num_trials` fake-passport trials.
pub fn fake_passport_attack(target: &AttackTarget<'_>, cfg: &AttackConfig) -> Result<AttackReport> {
    cfg.validate()?;
    let start = Instant::now();
    let ds = target.dataset;
    let valid = evaluate_accuracy(target.model, &ds.test, Some(target.passport))?;
    let meta = &target.passport.meta;
    let accuracies = match cfg.kind {
        AttackKind::FakeT1 => parallel_map(cfg.num_trials, worker_count(), |i| {
            let fake = gen_random_pattern(target.model, derive_seed(cfg.seed, &format!("t1/{i}")))?;
            evaluate_accuracy(target.model, &ds.test, Some(&fake))
        })?,
        AttackKind::FakeT2 => {
            if meta.passport_type == PassportType::RandomPattern {
                return Err(Error::Attack("T2 needs a feature-map passport to imitate".into()));
            }
            let labels = meta
                .source_image_ids
                .iter()
                .map(|id| ds.image_by_id(id).map(|(_, l)| l))
                .collect::<Result<Vec<_>>>()?;
            let by_class: Vec<Vec<usize>> = (0..ds.num_classes)
                .map(|c| (0..ds.test.len()).filter(|&i| ds.test.labels[i] == c).collect())
                .collect();
            parallel_map(cfg.num_trials, worker_count(), |i| {
                let mut rng = substream(cfg.seed, &format!("t2/{i}"));
                let ids = labels
                    .iter()
                    .map(|&l| {
                        by_class[l]
                            .choose(&mut rng)
                            .map(|&j| Dataset::image_id("test", j))
                            .ok_or_else(|| Error::Attack(format!("no held-out image of class {l}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let bank = feature_bank(target, &ids)?;
                let fake = bank.passport(&meta.choices, PassportType::FixedImage, cfg.seed, meta.total_layers)?;
                evaluate_accuracy(target.model, &ds.test, Some(&fake))
            })?
        }
        AttackKind::FakeT3 => {
            if meta.passport_type == PassportType::RandomPattern {
                return Err(Error::Attack("T3 needs a feature-map passport".into()));
            }
            let bank = feature_bank(target, &meta.source_image_ids)?;
            let n = bank.num_candidates();
            let l = bank.num_slots();
            if n <= 1 {
                return Err(Error::Attack(format!(
                    "only the true combination exists with N={n}, L={l}"
                )));
            }
            parallel_map(cfg.num_trials, worker_count(), |i| {
                let mut rng = substream(cfg.seed, &format!("t3/{i}"));
                let choices = loop {
                    let c: Vec<usize> = (0..l).map(|_| rng.random_range(0..n)).collect();
                    if c != meta.choices {
                        break c;
                    }
                };
                let fake = bank.passport(&choices, PassportType::RandomImage, cfg.seed, meta.total_layers)?;
                evaluate_accuracy(target.model, &ds.test, Some(&fake))
            })?
        }
        AttackKind::RevEng => return Err(Error::Attack("use reverse_engineer_hidden".into())),
    };
    Ok(AttackReport::new(
        cfg.kind,
        accuracies,
        valid,
        start.elapsed().as_secs_f64(),
    ))
}

/// Converts every passport layer of a clone of `model` into a plain unit.
///
/// Scale/shift values the passport used to derive become free parameters
/// initialized to 1 and 0; public trainable ones keep their cloned values.
/// Returns the converted model and the names of the free parameters.
pub fn strip_passports(model: &Model) -> Result<(Model, BTreeSet<String>)> {
    let free = model.partition_parameters().derived;
    let mut attacked = model.clone();
    let plain = vec![UnitNorm::Plain; model.units().len()];
    attacked.set_unit_norms(&plain)?;
    Ok((attacked, free))
}

/// Recovers hidden parameters by training them on the training split with
/// every cloned public parameter held constant. Running statistics are
/// re-estimated along the way. One trial per shuffle seed.
pub fn reverse_engineer_hidden(target: &AttackTarget<'_>, cfg: &AttackConfig) -> Result<(Model, AttackReport)> {
    cfg.validate()?;
    if cfg.kind != AttackKind::RevEng {
        return Err(Error::Attack("reverse_engineer_hidden runs only RevEng configs".into()));
    }
    let start = Instant::now();
    let ds = target.dataset;
    let valid = evaluate_accuracy(target.model, &ds.test, Some(target.passport))?;
    let results = parallel_map(cfg.num_trials, worker_count(), |i| {
        let (mut attacked, free) = strip_passports(target.model)?;
        let tc = TrainConfig {
            epochs: cfg.budget.epochs,
            batch_size: cfg.budget.batch_size,
            lr: cfg.budget.lr,
            schedule: cfg.budget.schedule.clone(),
            init_mode: InitMode::FromPretrained,
            seed: derive_seed(cfg.seed, &format!("reveng/{i}")),
            ..TrainConfig::default()
        };
        train(&mut attacked, None, &ds.train, None, &tc, Some(&free))?;
        let acc = evaluate_accuracy(&attacked, &ds.test, None)?;
        Ok((attacked, acc))
    })?;
    let accuracies = results.iter().map(|(_, a)| *a).collect();
    let recovered = results.into_iter().next().expect("at least one trial").0;
    Ok((
        recovered,
        AttackReport::new(cfg.kind, accuracies, valid, start.elapsed().as_secs_f64()),
    ))
}

/// Accuracy of the stripped model before any attacker training.
pub fn stripped_accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    let (m, _) = strip_passports(model)?;
    evaluate_accuracy(&m, &ds.test, None)
}
