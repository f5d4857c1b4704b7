//! End-to-end behaviour on a small learnable task: training, attacks,
//! restoration and ownership verification.

use std::sync::OnceLock;

use nnpp_core::attack::{reverse_engineer_hidden, strip_passports, stripped_accuracy, AttackConfig, AttackKind};
use nnpp_core::config::ExperimentConfig;
use nnpp_core::data::{synthetic, DatasetSpec, SyntheticSpec};
use nnpp_core::experiment::{protect_with, train_baseline, ProtectedRun};
use nnpp_core::model::{argmax_rows, Model, ModelConfig};
use nnpp_core::passgen::{gen_random_pattern, perturb_passport, PassportSet, PassportType};
use nnpp_core::passport::PassportKind;
use nnpp_core::persist::{checkpoint_container, model_from_container};
use nnpp_core::train::{evaluate_accuracy, init_weights, InitMode, Schedule};
use nnpp_core::verify::{restore_passport_functions, verify_ownership, ProtectionRecord, VerdictThresholds};
use nnpp_core::Error;

fn small_config(kind: PassportKind, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy(kind, seed);
    cfg.dataset = DatasetSpec::Synthetic(SyntheticSpec {
        noise: 0.3,
        ..SyntheticSpec::new(4, 40, 8, 3)
    });
    cfg.model.widths = vec![8, 16];
    cfg.train.epochs = 8;
    cfg.train.batch_size = 16;
    cfg.passport.num_candidates = 3;
    cfg.verify.curve_seeds = 5;
    cfg.attacks.reveng.epochs = 1;
    cfg
}

fn run_small(kind: PassportKind, seed: u64) -> ProtectedRun {
    let cfg = small_config(kind, seed);
    let ds = synthetic(match &cfg.dataset {
        DatasetSpec::Synthetic(s) => s,
        DatasetSpec::Idx(_) => unreachable!(),
    })
    .unwrap();
    let base = train_baseline(&cfg, &ds).unwrap();
    protect_with(&cfg, ds, Some(base)).unwrap()
}

/// One V3 run shared by the tests that only read it.
fn v3() -> &'static (ExperimentConfig, ProtectedRun, ProtectionRecord) {
    static RUN: OnceLock<(ExperimentConfig, ProtectedRun, ProtectionRecord)> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = small_config(PassportKind::V3, 11);
        let run = run_small(PassportKind::V3, 11);
        let record = run.protection_record(&cfg).unwrap();
        (cfg, run, record)
    })
}

fn verify(model: &Model, passport: &PassportSet) -> bool {
    let (_, run, record) = v3();
    verify_ownership(
        model,
        passport,
        record,
        &run.dataset.test,
        &VerdictThresholds::default(),
    )
    .unwrap()
    .positive
}

#[test]
fn fixture_learns_the_task() {
    let (_, run, _) = v3();
    assert!(
        run.metrics.a_p >= run.metrics.chance_level + 40.0,
        "A_p {}",
        run.metrics.a_p
    );
    assert!(run.metrics.a_o.unwrap() >= run.metrics.chance_level + 40.0);
}

#[test]
fn census_separates_derived_from_trainable() {
    let (_, run, _) = v3();
    let part = run.model.partition_parameters();
    for u in run.model.slot_units() {
        assert!(part.derived.contains(&u.gamma_name()) && part.derived.contains(&u.beta_name()));
        assert!(!part.trainable.contains(&u.gamma_name()) && !part.trainable.contains(&u.beta_name()));
    }
    let plain = run.baseline.as_ref().unwrap().partition_parameters();
    assert!(plain.derived.is_empty());
}

#[test]
fn from_scratch_init_is_bit_identical_per_seed() {
    let cfg = ModelConfig::mini_net(1, 8, 4, Some(PassportKind::V3));
    let mut a = Model::new(cfg.clone()).unwrap();
    let mut b = Model::new(cfg).unwrap();
    init_weights(&mut a, InitMode::FromScratch, 5, None).unwrap();
    init_weights(&mut b, InitMode::FromScratch, 5, None).unwrap();
    assert_eq!(
        checkpoint_container(&a).unwrap().to_bytes(),
        checkpoint_container(&b).unwrap().to_bytes()
    );
}

#[test]
fn from_pretrained_recomputes_hidden_params() {
    let (_, run, _) = v3();
    let mut fresh = Model::new(run.model.config.clone()).unwrap();
    init_weights(&mut fresh, InitMode::FromPretrained, 99, Some(&run.model)).unwrap();
    let images = &run.dataset.test.images;
    let expect = run.model.predict(images, Some(&run.passport)).unwrap();
    assert!(fresh.predict(images, Some(&run.passport)).unwrap().bit_eq(&expect));
    assert_eq!(
        fresh.hidden_params(Some(&run.passport)).unwrap(),
        run.model.hidden_params(Some(&run.passport)).unwrap()
    );
}

#[test]
fn separable_two_class_task_is_learned_like_the_baseline() {
    let mut cfg = small_config(PassportKind::V3, 2);
    cfg.dataset = DatasetSpec::Synthetic(SyntheticSpec {
        noise: 0.1,
        ..SyntheticSpec::new(2, 40, 8, 4)
    });
    cfg.passport.passport_type = PassportType::RandomPattern;
    cfg.train.epochs = 20;
    let DatasetSpec::Synthetic(spec) = &cfg.dataset else {
        unreachable!()
    };
    let ds = synthetic(spec).unwrap();
    let base = train_baseline(&cfg, &ds).unwrap();
    let run = protect_with(&cfg, ds.clone(), None).unwrap();
    let base_acc = evaluate_accuracy(&base, &ds.train, None).unwrap();
    let v3_acc = evaluate_accuracy(&run.model, &ds.train, Some(&run.passport)).unwrap();
    assert!(base_acc >= 95.0, "baseline train accuracy {base_acc}");
    assert!(v3_acc >= 95.0, "V3 train accuracy {v3_acc}");
}

#[test]
fn zero_passport_collapses_to_a_constant_prediction() {
    let (_, run, _) = v3();
    let mut zero = run.passport.clone();
    for e in &mut zero.entries {
        for t in [e.gamma.as_mut(), e.beta.as_mut()].into_iter().flatten() {
            t.data_mut().fill(0.0);
        }
    }
    let test = &run.dataset.test;
    let preds = argmax_rows(&run.model.predict(&test.images, Some(&zero)).unwrap());
    assert!(preds.iter().all(|&p| p == preds[0]));
    let share = 100.0 * test.labels.iter().filter(|&&l| l == preds[0]).count() as f64 / test.len() as f64;
    assert_eq!(evaluate_accuracy(&run.model, test, Some(&zero)).unwrap(), share);
    assert!((share - run.metrics.chance_level).abs() <= 5.0);
}

#[test]
fn evaluation_is_deterministic() {
    let (_, run, _) = v3();
    let a = evaluate_accuracy(&run.model, &run.dataset.test, Some(&run.passport)).unwrap();
    assert_eq!(
        a,
        evaluate_accuracy(&run.model, &run.dataset.test, Some(&run.passport)).unwrap()
    );
    assert_eq!(a, run.metrics.a_p);
}

#[test]
fn telemetry_snapshots_match_hidden_params() {
    let (cfg, run, _) = v3();
    let t = &run.telemetry;
    assert_eq!(t.epochs().len(), cfg.train.epochs);
    let last = *t.epochs().iter().max().unwrap();
    let hidden = run.model.hidden_params(Some(&run.passport)).unwrap();
    for (u, h) in run.model.units().iter().zip(&hidden) {
        let Some(_) = u.slot else { continue };
        let row = t.records.iter().find(|r| r.epoch == last && r.layer == u.name).unwrap();
        assert_eq!(row.gamma, h.gamma.data());
        assert_eq!(row.beta, h.beta.data());
    }
}

#[test]
fn decaying_schedule_shrinks_late_updates() {
    for seed in 0..5 {
        let mut cfg = small_config(PassportKind::V3, seed);
        cfg.passport.passport_type = PassportType::RandomPattern;
        cfg.train.schedule = Schedule::Cosine;
        cfg.baseline = false;
        let DatasetSpec::Synthetic(spec) = &cfg.dataset else {
            unreachable!()
        };
        let run = protect_with(&cfg, synthetic(spec).unwrap(), None).unwrap();
        let mean_at = |e: usize| {
            let rows: Vec<f64> = run
                .telemetry
                .records
                .iter()
                .filter(|r| r.epoch == e)
                .map(|r| r.update_magnitude)
                .collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        };
        let (early, late) = (mean_at(1), mean_at(cfg.train.epochs));
        assert!(late < early, "seed {seed}: late {late} >= early {early}");
    }
}

#[test]
fn protection_run_is_reproducible() {
    let a = run_small(PassportKind::V1, 4);
    let b = run_small(PassportKind::V1, 4);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(
        checkpoint_container(&a.model).unwrap().to_bytes(),
        checkpoint_container(&b.model).unwrap().to_bytes()
    );
    assert_eq!(a.passport, b.passport);
}

#[test]
fn attacks_leave_the_protected_model_untouched() {
    let (cfg, run, _) = v3();
    let before = run.model.content_hash();
    for kind in [
        AttackKind::FakeT1,
        AttackKind::FakeT2,
        AttackKind::FakeT3,
        AttackKind::RevEng,
    ] {
        let mut c = cfg.clone();
        c.attacks.t1_trials = 5;
        c.attacks.t2_trials = 5;
        c.attacks.t3_trials = 5;
        let report = run.attack(&c, kind).unwrap();
        assert!(!report.accuracies.is_empty());
        assert_eq!(run.model.content_hash(), before, "{}", kind.name());
    }
}

#[test]
fn attack_reports_are_seeded() {
    let (cfg, run, _) = v3();
    let mut c = cfg.clone();
    c.attacks.t3_trials = 10;
    let a = run.attack(&c, AttackKind::FakeT3).unwrap();
    let b = run.attack(&c, AttackKind::FakeT3).unwrap();
    assert_eq!(a.accuracies, b.accuracies);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn t1_report_holds_every_trial() {
    let (_, run, _) = v3();
    let report =
        nnpp_core::attack::fake_passport_attack(&run.target(), &AttackConfig::new(AttackKind::FakeT1, 1000, 3))
            .unwrap();
    assert_eq!(report.accuracies.len(), 1000);
    assert_eq!(report.to_csv().lines().count(), 1001);
}

#[test]
fn t3_with_a_single_candidate_is_an_attack_error() {
    let mut cfg = small_config(PassportKind::V3, 6);
    cfg.passport.num_candidates = 1;
    cfg.train.epochs = 1;
    let DatasetSpec::Synthetic(spec) = &cfg.dataset else {
        unreachable!()
    };
    let ds = synthetic(spec).unwrap();
    let base = train_baseline(&cfg, &ds).unwrap();
    let run = protect_with(&cfg, ds, Some(base)).unwrap();
    assert!(matches!(run.attack(&cfg, AttackKind::FakeT3), Err(Error::Attack(_))));
}

#[test]
fn reverse_engineering_needs_an_epoch() {
    let (_, run, _) = v3();
    let mut ac = AttackConfig::new(AttackKind::RevEng, 1, 0);
    ac.budget.epochs = 0;
    assert!(matches!(
        reverse_engineer_hidden(&run.target(), &ac),
        Err(Error::Config(_))
    ));
    let s = stripped_accuracy(&run.model, &run.dataset).unwrap();
    assert_eq!(s, stripped_accuracy(&run.model, &run.dataset).unwrap());
}

#[test]
fn restored_model_with_true_passport_matches_the_record() {
    let (_, run, record) = v3();
    let (stripped, _) = strip_passports(&run.model).unwrap();
    let restored = restore_passport_functions(&stripped, &run.model.config).unwrap();
    let acc = evaluate_accuracy(&restored, &run.dataset.test, Some(&run.passport)).unwrap();
    assert_eq!(acc, record.valid_accuracy);
    assert!(verify(&restored, &run.passport));

    let mut other = run.model.config.clone();
    other.widths = vec![8, 8];
    assert!(matches!(
        restore_passport_functions(&stripped, &other),
        Err(Error::Verification(_))
    ));
}

#[test]
fn restored_model_with_random_passports_is_near_chance() {
    let (_, run, _) = v3();
    let (stripped, _) = strip_passports(&run.model).unwrap();
    let restored = restore_passport_functions(&stripped, &run.model.config).unwrap();
    let accs: Vec<f64> = (0..100)
        .map(|s| {
            let fake = gen_random_pattern(&restored, 1000 + s).unwrap();
            evaluate_accuracy(&restored, &run.dataset.test, Some(&fake)).unwrap()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!(mean <= run.metrics.chance_level + 15.0, "mean fake accuracy {mean}");
}

#[test]
fn unrelated_models_do_not_reproduce_the_record() {
    let (_, run, record) = v3();
    for seed in 20..25 {
        let other = run_small(PassportKind::V3, seed);
        let acc = evaluate_accuracy(&other.model, &run.dataset.test, Some(&run.passport)).unwrap();
        assert!((acc - record.valid_accuracy).abs() > 2.0, "seed {seed}: {acc}");
        assert!(!verify(&other.model, &run.passport));
    }
}

#[test]
fn owner_is_verified_and_corrupted_claims_are_not() {
    let (_, run, _) = v3();
    assert!(verify(&run.model, &run.passport));

    // The corruption check needs the 10-class toy task: the small task's
    // model degrades too gently for one corrupted claim to be decisive.
    let cfg = ExperimentConfig::toy(PassportKind::V3, 0);
    let DatasetSpec::Synthetic(spec) = &cfg.dataset else {
        unreachable!()
    };
    let ds = synthetic(spec).unwrap();
    let base = train_baseline(&cfg, &ds).unwrap();
    let toy = protect_with(&cfg, ds, Some(base)).unwrap();
    let record = toy.protection_record(&cfg).unwrap();
    let thresholds = VerdictThresholds::default();
    assert!(
        verify_ownership(&toy.model, &toy.passport, &record, &toy.dataset.test, &thresholds)
            .unwrap()
            .positive
    );
    for noise_seed in 0..5 {
        let corrupted = perturb_passport(&toy.passport, 0.3, noise_seed).unwrap();
        let ev = verify_ownership(&toy.model, &corrupted, &record, &toy.dataset.test, &thresholds).unwrap();
        assert!(
            !ev.accuracy_match && !ev.positive,
            "noise seed {noise_seed}: {}",
            ev.measured_accuracy
        );
    }
}

#[test]
fn tampered_passport_file_fails_verification() {
    let (_, run, _) = v3();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("passport.nnpp");
    run.passport.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let first = run.passport.entries[0].gamma.as_ref().unwrap();
    let (idx, _) = first
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .unwrap();
    let needle = first.data()[idx].to_le_bytes();
    let pos = bytes.windows(4).position(|w| w == needle).unwrap();
    // Raise the exponent by 8: the element grows 256-fold.
    bytes[pos + 3] += 0x04;
    std::fs::write(&path, &bytes).unwrap();
    let tampered = PassportSet::load(&path).unwrap();
    assert_ne!(tampered, run.passport);
    assert!(!verify(&run.model, &tampered));
}

#[test]
fn curve_records_every_evaluation() {
    let (_, run, _) = v3();
    let grid = [0.0, 0.1, 0.25, 0.5, 1.0];
    let rec = ProtectionRecord::measure(&run.model, &run.passport, &run.dataset.test, &grid, 20, 8).unwrap();
    let curve = rec.curve.unwrap();
    assert_eq!(curve.evaluations(), 100);
    assert_eq!(curve.mean[0], run.metrics.a_p);
    assert_eq!(curve.std[0], 0.0);
}

#[test]
fn binding_requires_an_entry_per_layer() {
    let (_, run, _) = v3();
    let mut short = run.passport.clone();
    short.entries.pop();
    assert!(matches!(short.check_binding(&run.model), Err(Error::Passport(_))));
    run.passport.check_binding(&run.model).unwrap();
}

#[test]
fn every_passport_type_round_trips_through_a_file() {
    let (cfg, run, _) = v3();
    let dir = tempfile::tempdir().unwrap();
    for t in [
        PassportType::RandomPattern,
        PassportType::FixedImage,
        PassportType::RandomImage,
    ] {
        let mut c = cfg.clone();
        c.passport.passport_type = t;
        let p = nnpp_core::experiment::make_passport(&c, &run.model, run.baseline.as_ref(), &run.dataset).unwrap();
        let path = dir.path().join("p.nnpp");
        p.save(&path).unwrap();
        assert_eq!(PassportSet::load(&path).unwrap(), p);
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (_, run, _) = v3();
    let back = model_from_container(&checkpoint_container(&run.model).unwrap()).unwrap();
    let images = &run.dataset.test.images;
    assert!(back
        .predict(images, Some(&run.passport))
        .unwrap()
        .bit_eq(&run.model.predict(images, Some(&run.passport)).unwrap()));
}
