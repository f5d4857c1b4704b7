//! SGD training, accuracy evaluation and per-epoch telemetry.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{shape_err, Error, Result};
use crate::model::{argmax_rows, GradSpec, Mode, Model, UnitNorm};
use crate::passgen::PassportSet;
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay to zero over all steps.
    Cosine,
    /// Multiply by `factor` every `every` epochs.
    Step {
        every: usize,
        factor: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    FromScratch,
    FromPretrained,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub init_mode: InitMode,
    pub seed: u64,
    #[serde(default)]
    pub telemetry: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            schedule: Schedule::Cosine,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            init_mode: InitMode::FromScratch,
            seed: 0,
            telemetry: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1), weight decay >= 0".into()));
        }
        if let Schedule::Step { every, factor } = self.schedule {
            if every == 0 || factor <= 0.0 {
                return Err(Error::Config("step schedule needs every >= 1 and factor > 0".into()));
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => self.lr * 0.5 * (1.0 + (PI * step as f64 / total_steps.max(1) as f64).cos()),
            Schedule::Step { every, factor } => self.lr * factor.powi((epoch / every) as i32),
        }
    }
}

/// Initializes weights: He-normal from scratch, or copies every stored
/// tensor of a compatible pretrained model. Derived parameters are never
/// copied; they follow from the weights and the new passport.
pub fn init_weights(model: &mut Model, mode: InitMode, seed: u64, pretrained: Option<&Model>) -> Result<()> {
    model.init_he(seed);
    if mode == InitMode::FromScratch {
        return Ok(());
    }
    let src = pretrained.ok_or_else(|| Error::Config("from_pretrained needs a checkpoint".into()))?;
    let names: Vec<String> = model.params().keys().chain(model.buffers().keys()).cloned().collect();
    for name in names {
        let value = src.params().get(&name).or_else(|| src.buffers().get(&name)).cloned();
        match value {
            Some(v) => model.set_tensor(&name, v)?,
            None if name.ends_with(".gamma") || name.ends_with(".beta") => {}
            None => return Err(shape_err(format!("pretrained model lacks {name}"))),
        }
    }
    Ok(())
}

/// One telemetry row for one monitored layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub epoch: usize,
    pub layer: String,
    /// Mean absolute change of the layer's conv weight over the epoch.
    pub update_magnitude: f64,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TelemetryLog {
    pub records: Vec<TelemetryRecord>,
}

impl TelemetryLog {
    pub fn epochs(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.epoch).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,layer,update_magnitude,gamma_mean,beta_mean,test_acc\n");
        for r in &self.records {
            let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64;
            let acc = r.test_acc.map_or(String::new(), |a| format!("{a}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch,
                r.layer,
                r.update_magnitude,
                mean(&r.gamma),
                mean(&r.beta),
                acc
            );
        }
        s
    }
}

/// Conv weights of the slotted layers, the ones telemetry watches.
pub fn monitored_weights(model: &Model) -> BTreeMap<String, Tensor> {
    model
        .slot_units()
        .iter()
        .map(|u| (u.name.clone(), model.params()[&u.weight_name()].clone()))
        .collect()
}

/// Telemetry rows for `epoch`, measuring weight change since `previous`.
pub fn record_telemetry(
    model: &Model,
    passport: Option<&PassportSet>,
    previous: &BTreeMap<String, Tensor>,
    epoch: usize,
    train_acc: f64,
    test_acc: Option<f64>,
) -> Result<Vec<TelemetryRecord>> {
    let hidden = model.hidden_params(passport)?;
    let mut rows = Vec::new();
    for (i, u) in model.units().iter().enumerate() {
        if u.slot.is_none() {
            continue;
        }
        let w = &model.params()[&u.weight_name()];
        let update = match previous.get(&u.name) {
            Some(p) => {
                w.data()
                    .iter()
                    .zip(p.data())
                    .map(|(a, b)| (a - b).abs() as f64)
                    .sum::<f64>()
                    / w.len() as f64
            }
            None => 0.0,
        };
        rows.push(TelemetryRecord {
            epoch,
            layer: u.name.clone(),
            update_magnitude: update,
            gamma: hidden[i].gamma.data().to_vec(),
            beta: hidden[i].beta.data().to_vec(),
            train_acc,
            test_acc,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub telemetry: TelemetryLog,
}

/// Trains `model` in place with SGD + momentum.
///
/// Only parameters in `trainable` are updated (all stored parameters when
/// `None`). Derived scale/shift values are recomputed from the weights and
/// `passport` in every forward pass. The loss is plain cross entropy.
pub fn train(
    model: &mut Model,
    passport: Option<&PassportSet>,
    data: &Split,
    eval: Option<&Split>,
    cfg: &TrainConfig,
    trainable: Option<&BTreeSet<String>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if let Some(p) = passport {
        p.check_binding(model)?;
    }
    let names: BTreeSet<String> = match trainable {
        Some(t) => {
            if let Some(bad) = t.iter().find(|n| !model.params().contains_key(*n)) {
                return Err(Error::Config(format!("cannot train unknown parameter {bad:?}")));
            }
            t.clone()
        }
        None => model.params().keys().cloned().collect(),
    };
    let grads = GradSpec::Only(names.clone());
    let mut velocity: BTreeMap<String, Vec<f32>> = names
        .iter()
        .map(|n| (n.clone(), vec![0.0; model.params()[n].len()]))
        .collect();
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let before = cfg.telemetry.then(|| monitored_weights(model));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, &format!("shuffle/{epoch}")));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let images = data.images.gather_batch(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::<f32>::new();
            let out = model.forward(&mut tape, &images, passport, Mode::Train, &grads, false)?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Numerics {
                    message: format!("loss became {lv}"),
                    epoch: Some(epoch),
                });
            }
            loss_sum += lv as f64 * batch.len() as f64;
            correct += argmax_rows(tape.value(out.logits))
                .iter()
                .zip(&labels)
                .filter(|(a, b)| a == b)
                .count();
            tape.backward(loss)?;
            let lr = cfg.lr_at(epoch, step, total_steps) as f32;
            let (mom, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
            for name in &names {
                let var = out.params[name];
                let Some(g) = tape.grad(var) else { continue };
                let v = velocity.get_mut(name).expect("velocity per trainable");
                let w = model.param_mut(name)?;
                for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vi = mom * *vi + gi + wd * *wi;
                    *wi -= lr * *vi;
                }
            }
            model.update_running_stats(&out.batch_stats)?;
            step += 1;
        }
        for name in &names {
            model.params()[name].validate_finite().map_err(|_| Error::Numerics {
                message: format!("parameter {name} became non-finite"),
                epoch: Some(epoch),
            })?;
        }
        report.epoch_losses.push(loss_sum / n as f64);
        if let Some(before) = before {
            let train_acc = 100.0 * correct as f64 / n as f64;
            let test_acc = eval.map(|e| evaluate_accuracy(model, e, passport)).transpose()?;
            report.telemetry.records.extend(record_telemetry(
                model,
                passport,
                &before,
                epoch + 1,
                train_acc,
                test_acc,
            )?);
        }
    }
    Ok(report)
}

/// Top-1 accuracy in percent, with running statistics.
pub fn evaluate_accuracy(model: &Model, data: &Split, passport: Option<&PassportSet>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    const CHUNK: usize = 256;
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let logits = model.predict(&data.images.batch_range(start, end)?, passport)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Names of scale/shift parameters that a passport layer of `model` derives.
pub fn derived_names(model: &Model) -> BTreeSet<String> {
    model.partition_parameters().derived
}

/// True when every passport layer in `model` uses `kind`.
pub fn is_protected_with(model: &Model, kind: crate::passport::PassportKind) -> bool {
    model.num_passport_layers() > 0
        && model
            .units()
            .iter()
            .all(|u| u.slot.is_none() || u.norm == UnitNorm::Passport(kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::passgen::gen_random_pattern;
    use crate::passport::PassportKind;

    fn setup(kind: Option<PassportKind>) -> (Model, Option<PassportSet>, crate::data::Dataset) {
        let ds = synthetic(&SyntheticSpec::new(2, 30, 8, 3)).unwrap();
        let mut m = Model::new(ModelConfig::mini_net(1, 8, 2, kind)).unwrap();
        init_weights(&mut m, InitMode::FromScratch, 1, None).unwrap();
        let p = kind.map(|_| gen_random_pattern(&m, 2).unwrap());
        (m, p, ds)
    }

    #[test]
    fn zero_epochs_leaves_model_untouched() {
        let (mut m, p, ds) = setup(Some(PassportKind::V3));
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        train(&mut m, p.as_ref(), &ds.train, None, &cfg, None).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn he_init_std_matches_fan_in() {
        let mut cfg = ModelConfig::mini_net(1, 8, 2, None);
        cfg.widths = vec![1200, 2];
        let mut m = Model::new(cfg).unwrap();
        init_weights(&mut m, InitMode::FromScratch, 4, None).unwrap();
        let w = m.param("block0.conv.weight").unwrap();
        assert!(w.len() >= 10_000);
        let n = w.len() as f64;
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = (2.0f64 / 9.0).sqrt();
        assert!((std - expected).abs() < 0.1 * expected, "{std} vs {expected}");
    }

    #[test]
    fn telemetry_has_one_row_per_epoch_and_layer() {
        let (mut m, p, ds) = setup(Some(PassportKind::V3));
        let cfg = TrainConfig {
            epochs: 3,
            telemetry: true,
            ..TrainConfig::default()
        };
        let r = train(&mut m, p.as_ref(), &ds.train, Some(&ds.test), &cfg, None).unwrap();
        assert_eq!(r.telemetry.records.len(), 3 * m.num_slots());
        assert_eq!(r.telemetry.epochs().len(), 3);
        let csv = r.telemetry.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * m.num_slots());
        let last = r.telemetry.records.last().unwrap();
        let hidden = m.hidden_params(p.as_ref()).unwrap();
        assert_eq!(last.gamma, hidden[1].gamma.data());
    }

    #[test]
    fn telemetry_before_any_step_reports_zero_update() {
        let (m, p, _) = setup(Some(PassportKind::V1));
        let rows = record_telemetry(&m, p.as_ref(), &monitored_weights(&m), 0, 0.0, None).unwrap();
        assert!(rows.iter().all(|r| r.update_magnitude == 0.0));
    }

    #[test]
    fn empty_split_is_a_data_error() {
        let (m, p, ds) = setup(Some(PassportKind::V2));
        let empty = ds.test.subset(&[]).unwrap();
        assert!(matches!(evaluate_accuracy(&m, &empty, p.as_ref()), Err(Error::Data(_))));
    }

    #[test]
    fn divergence_reports_epoch() {
        let (mut m, p, ds) = setup(None);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 1e30,
            schedule: Schedule::Constant,
            ..TrainConfig::default()
        };
        let err = train(&mut m, p.as_ref(), &ds.train, None, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Numerics { epoch: Some(_), .. }), "{err:?}");
    }

    #[test]
    fn only_listed_parameters_move() {
        let (mut m, p, ds) = setup(Some(PassportKind::V1));
        let before = m.clone();
        let only: BTreeSet<String> = ["fc.bias".to_string()].into();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        train(&mut m, p.as_ref(), &ds.train, None, &cfg, Some(&only)).unwrap();
        for (name, t) in before.params() {
            assert_eq!(t == m.param(name).unwrap(), name != "fc.bias", "{name}");
        }
    }
}
