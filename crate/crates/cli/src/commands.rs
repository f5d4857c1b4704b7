//! Subcommand implementations.

use std::path::{Path, PathBuf};

use nnpp_core::attack::{AttackKind, AttackReport};
use nnpp_core::config::ExperimentConfig;
use nnpp_core::data::{load_dataset, write_idx_dataset, DatasetSpec};
use nnpp_core::experiment::{make_passport, protect_with, stage_seed, train_baseline, ProtectedRun, RunMetrics};
use nnpp_core::model::Model;
use nnpp_core::passgen::{PassportSet, PassportType};
use nnpp_core::persist::{load_checkpoint, save_checkpoint, sha256_hex, write_atomic};
use nnpp_core::verify::{export_histogram, restore_passport_functions, verify_ownership, ProtectionRecord};
use nnpp_core::{Error, Result};

use crate::rundir::{read_json, write_json, Manifest, RunLock};
use crate::{Cli, Command, ConfigArgs};

pub const CONFIG: &str = "config.json";
pub const CHECKPOINT: &str = "checkpoint.nnpp";
pub const PASSPORT: &str = "passport.nnpp";
pub const BASELINE: &str = "baseline.nnpp";
pub const METRICS: &str = "metrics.json";
pub const TELEMETRY: &str = "telemetry.csv";
pub const RECORD: &str = "protection_record.json";
pub const ATTACKS: &str = "attacks";

struct Log(u8);

impl Log {
    fn info(&self, msg: impl AsRef<str>) {
        if self.0 > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

pub fn run(cli: &Cli) -> Result<u8> {
    let log = Log(cli.verbose);
    match &cli.command {
        Command::Train { config, baseline, out } => cmd_train(config, *baseline, out, &log),
        Command::Attack {
            run,
            kind,
            trials,
            budget_epochs,
            seed,
        } => cmd_attack(run, *kind, *trials, *budget_epochs, *seed, &log),
        Command::Verify {
            run,
            checkpoint,
            passport,
            out,
        } => cmd_verify(run, checkpoint.as_deref(), passport.as_deref(), out.as_deref()),
        Command::Report { dir } => crate::report::cmd_report(dir),
        Command::GenPassport { config, reference, out } => cmd_gen_passport(config, reference.as_deref(), out),
        Command::DatasetGen { config, out } => cmd_dataset_gen(config, out),
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?.with_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_train(args: &ConfigArgs, baseline: bool, out: &Path, log: &Log) -> Result<u8> {
    let mut cfg = load_config(args)?;
    cfg.baseline |= baseline;
    let lock = RunLock::acquire(out)?;
    write_json(&out.join(CONFIG), &cfg)?;
    let ds = load_dataset(&cfg.dataset)?;
    let needs_reference = cfg.passport.passport_type != PassportType::RandomPattern;
    let base = if cfg.baseline || needs_reference {
        log.info("training passport-free baseline");
        Some(train_baseline(&cfg, &ds)?)
    } else {
        None
    };
    log.info(format!("training {} protected network", cfg.model.passport));
    let run = protect_with(&cfg, ds, base)?;
    log.info("recording signature curve");
    let record = run.protection_record(&cfg)?;
    save_checkpoint(&run.model, &out.join(CHECKPOINT))?;
    run.passport.save(&out.join(PASSPORT))?;
    if let Some(b) = &run.baseline {
        save_checkpoint(b, &out.join(BASELINE))?;
    }
    write_json(&out.join(METRICS), &run.metrics)?;
    write_atomic(&out.join(TELEMETRY), run.telemetry.to_csv().as_bytes())?;
    write_json(&out.join(RECORD), &record)?;
    Manifest::refresh(out, &lock)?;
    println!("{}", serde_json::to_string_pretty(&run.metrics)?);
    Ok(0)
}

/// A finished run loaded back from its directory.
struct LoadedRun {
    cfg: ExperimentConfig,
    run: ProtectedRun,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let need = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Config(format!("missing artifact {}", p.display())))
        }
    };
    let cfg = ExperimentConfig::load(&need(CONFIG)?)?;
    let metrics: RunMetrics = read_json(&need(METRICS)?)?;
    let model = load_checkpoint(&need(CHECKPOINT)?)?;
    let passport = PassportSet::load(&need(PASSPORT)?)?;
    let baseline = match dir.join(BASELINE) {
        p if p.exists() => Some(load_checkpoint(&p)?),
        _ => None,
    };
    let dataset = load_dataset(&cfg.dataset)?;
    if dataset.split_hash != metrics.split_hash {
        return Err(Error::Data(
            "dataset differs from the one the run was trained on".into(),
        ));
    }
    let telemetry = Default::default();
    Ok(LoadedRun {
        cfg,
        run: ProtectedRun {
            dataset,
            baseline,
            model,
            passport,
            telemetry,
            metrics,
        },
    })
}

fn cmd_attack(
    dir: &Path,
    kind: AttackKind,
    trials: Option<usize>,
    budget_epochs: Option<usize>,
    seed: Option<u64>,
    log: &Log,
) -> Result<u8> {
    let LoadedRun { mut cfg, run } = load_run(dir)?;
    if let Some(t) = trials {
        match kind {
            AttackKind::FakeT1 => cfg.attacks.t1_trials = t,
            AttackKind::FakeT2 => cfg.attacks.t2_trials = t,
            AttackKind::FakeT3 => cfg.attacks.t3_trials = t,
            AttackKind::RevEng => cfg.attacks.reveng_trials = t,
        }
    }
    if let Some(e) = budget_epochs {
        cfg.attacks.reveng.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let lock = RunLock::acquire(dir)?;
    let before = sha256_hex(&std::fs::read(dir.join(CHECKPOINT))?);
    log.info(format!("running {} attack", kind.name()));
    let report = run.attack(&cfg, kind)?;
    if sha256_hex(&std::fs::read(dir.join(CHECKPOINT))?) != before || run.model.content_hash() != run.metrics.model_hash
    {
        return Err(Error::Attack("attack modified the protected model".into()));
    }
    let out = dir.join(ATTACKS);
    let name = kind.name();
    write_atomic(&out.join(format!("{name}.csv")), report.to_csv().as_bytes())?;
    write_json(&out.join(format!("{name}.json")), &report.summary_json())?;
    export_histogram(
        &report.accuracies,
        cfg.attacks.histogram_bin_width,
        run.metrics.a_o,
        Some(report.valid_accuracy),
        &out.join(format!("{name}_hist.csv")),
    )?;
    Manifest::refresh(dir, &lock)?;
    print_report(&report);
    Ok(0)
}

fn print_report(r: &AttackReport) {
    println!(
        "{}: trials={} A_p={:.2} mean A_t={:.2} ({:.2}) S={:.2} wall={:.1}s",
        r.kind.name(),
        r.accuracies.len(),
        r.valid_accuracy,
        r.mean,
        r.std,
        r.strength,
        r.wall_time_secs
    );
}

fn cmd_verify(dir: &Path, checkpoint: Option<&Path>, passport: Option<&Path>, out: Option<&Path>) -> Result<u8> {
    let manifest = Manifest::load(dir).map_err(|e| Error::Verification(format!("evidence store: {e}")))?;
    manifest.check(dir, RECORD)?;
    manifest.check(dir, CONFIG)?;
    let record: ProtectionRecord = read_json(&dir.join(RECORD))?;
    let cfg = ExperimentConfig::load(&dir.join(CONFIG))?;
    let ds = load_dataset(&cfg.dataset)?;
    let suspect = load_checkpoint(checkpoint.unwrap_or(&dir.join(CHECKPOINT)))?;
    let passport = PassportSet::load(passport.unwrap_or(&dir.join(PASSPORT)))?;
    let [c, h, _] = ds.image_shape();
    let claimed = cfg.model_config(c, h, ds.num_classes);
    let suspect = if suspect.num_passport_layers() == 0 {
        restore_passport_functions(&suspect, &claimed)?
    } else {
        suspect
    };
    passport.check_binding(&suspect)?;
    let evidence = verify_ownership(&suspect, &passport, &record, &ds.test, &cfg.verify.thresholds)?;
    let text = serde_json::to_string_pretty(&evidence)?;
    println!("{text}");
    match out {
        Some(p) => write_json(p, &evidence)?,
        None => {
            let lock = RunLock::acquire(dir)?;
            write_json(&dir.join("verdict.json"), &evidence)?;
            Manifest::refresh(dir, &lock)?;
        }
    }
    Ok(if evidence.positive { 0 } else { 1 })
}

fn cmd_gen_passport(args: &ConfigArgs, reference: Option<&Path>, out: &Path) -> Result<u8> {
    let cfg = load_config(args)?;
    let ds = load_dataset(&cfg.dataset)?;
    let [c, h, _] = ds.image_shape();
    let model = Model::new(cfg.model_config(c, h, ds.num_classes))?;
    let reference = reference.map(load_checkpoint).transpose()?;
    let p = make_passport(&cfg, &model, reference.as_ref(), &ds)?;
    p.save(out)?;
    println!(
        "{} {} passport, {} layers, seed {}, sha256 {}",
        cfg.model.passport,
        serde_json::to_string(&p.meta.passport_type)?.trim_matches('"'),
        p.entries.len(),
        stage_seed(cfg.seed, "passport"),
        p.content_hash()?
    );
    Ok(0)
}

fn cmd_dataset_gen(args: &ConfigArgs, out: &Path) -> Result<u8> {
    let cfg = load_config(args)?;
    let ds = load_dataset(&cfg.dataset)?;
    let spec = write_idx_dataset(&ds, out)?;
    write_json(&out.join("dataset.json"), &DatasetSpec::Idx(spec))?;
    println!(
        "{} train / {} test images, {} classes, split {}",
        ds.train.len(),
        ds.test.len(),
        ds.num_classes,
        ds.split_hash
    );
    Ok(0)
}
