//! Summary tables over run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nnpp_core::attack::{mean_std, AttackKind};
use nnpp_core::experiment::RunMetrics;
use nnpp_core::passgen::PassportType;
use nnpp_core::passport::PassportKind;
use nnpp_core::persist::write_atomic;
use nnpp_core::{Error, Result};

use crate::commands::{ATTACKS, METRICS};
use crate::rundir::read_json;

pub const REPORT: &str = "report.txt";

const COLUMNS: [AttackKind; 4] = [
    AttackKind::FakeT1,
    AttackKind::FakeT2,
    AttackKind::FakeT3,
    AttackKind::RevEng,
];

/// `mean (std)` with two decimals.
pub fn cell(xs: &[f64]) -> String {
    if xs.is_empty() {
        return "-".into();
    }
    let (m, s) = mean_std(xs);
    format!("{m:.2} ({s:.2})")
}

fn required(t: PassportType) -> Vec<AttackKind> {
    match t {
        PassportType::RandomPattern => vec![AttackKind::FakeT1, AttackKind::RevEng],
        _ => COLUMNS.to_vec(),
    }
}

fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(METRICS).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn read_trials(csv: &Path) -> Result<Vec<f64>> {
    fs::read_to_string(csv)?
        .lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad row {l:?}", csv.display())))
        })
        .collect()
}

#[derive(Default)]
struct Row {
    runs: usize,
    a_o: Vec<f64>,
    a_p: Vec<f64>,
    inconsistency: Vec<f64>,
    strengths: BTreeMap<AttackKind, Vec<f64>>,
}

/// Builds the table text, the list of incomplete runs and the run count.
pub fn build_report(dir: &Path) -> Result<(String, Vec<String>, usize)> {
    let mut rows: BTreeMap<PassportKind, Row> = BTreeMap::new();
    let mut incomplete = Vec::new();
    for run in run_dirs(dir)? {
        let name = run
            .file_name()
            .map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned());
        let metrics_path = run.join(METRICS);
        if !metrics_path.exists() {
            incomplete.push(format!("{name}: no {METRICS}"));
            continue;
        }
        let m: RunMetrics = read_json(&metrics_path)?;
        let row = rows.entry(m.kind).or_default();
        row.runs += 1;
        row.a_p.push(m.a_p);
        row.a_o.extend(m.a_o);
        row.inconsistency.extend(m.inconsistency);
        let mut missing = Vec::new();
        for kind in required(m.passport_type) {
            let csv = run.join(ATTACKS).join(format!("{}.csv", kind.name()));
            if !csv.exists() {
                missing.push(kind.name());
                continue;
            }
            let s = row.strengths.entry(kind).or_default();
            s.extend(read_trials(&csv)?.into_iter().map(|a_t| m.a_p - a_t));
        }
        if !missing.is_empty() {
            incomplete.push(format!("{name}: missing {}", missing.join(", ")));
        }
    }
    let mut text = String::new();
    let _ = writeln!(
        text,
        "Protection strength S = A_p - A_t, mean (std) over all trials of all runs"
    );
    let _ = writeln!(text, "Inconsistency I = A_o - A_p, mean (std) over runs");
    let _ = writeln!(text);
    let header = ["variant", "runs", "A_o", "A_p", "I", "T1", "T2", "T3", "RevEng"];
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (kind, row) in &rows {
        let mut r = vec![
            kind.to_string(),
            row.runs.to_string(),
            cell(&row.a_o),
            cell(&row.a_p),
            cell(&row.inconsistency),
        ];
        for k in COLUMNS {
            r.push(cell(row.strengths.get(&k).map_or(&[][..], Vec::as_slice)));
        }
        table.push(r);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for r in &table {
        let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(text, "{}", line.join("  ").trim_end());
    }
    let runs = rows.values().map(|r| r.runs).sum();
    Ok((text, incomplete, runs))
}

pub fn cmd_report(dir: &Path) -> Result<u8> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let (text, incomplete, runs) = build_report(dir)?;
    if runs == 0 && incomplete.is_empty() {
        eprintln!("no runs found under {}", dir.display());
        return Ok(1);
    }
    print!("{text}");
    write_atomic(&dir.join(REPORT), text.as_bytes())?;
    if incomplete.is_empty() {
        return Ok(0);
    }
    eprintln!("incomplete runs:");
    for i in &incomplete {
        eprintln!("  {i}");
    }
    Ok(1)
}
