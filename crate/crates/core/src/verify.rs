//! Protection metrics, verdicts, signature curves and ownership verification.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{mean_std, parallel_map, worker_count};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, UnitNorm};
use crate::passgen::{perturb_passport, PassportSet};
use crate::persist::write_atomic;
use crate::rng::derive_seed;
use crate::train::evaluate_accuracy;

/// Tolerance for the exact metric identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

fn default_tau_d() -> f64 {
    1.0
}

fn default_tau_s() -> f64 {
    50.0
}

fn default_epsilon() -> f64 {
    2.0
}

/// Thresholds in accuracy points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictThresholds {
    /// Largest |inconsistency| still counted as functionality-preserving.
    #[serde(default = "default_tau_d")]
    pub tau_d: f64,
    /// Smallest strength counted as well-protected.
    #[serde(default = "default_tau_s")]
    pub tau_s: f64,
    /// Accuracy tolerance when matching recorded performance.
    #[serde(default = "default_epsilon")]
    pub epsilon_match: f64,
}

impl Default for VerdictThresholds {
    fn default() -> Self {
        Self {
            tau_d: default_tau_d(),
            tau_s: default_tau_s(),
            epsilon_match: default_epsilon(),
        }
    }
}

impl VerdictThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_d >= 0.0 && self.tau_s >= 0.0 && self.epsilon_match > 0.0) {
            return Err(Error::Config(format!(
                "thresholds need tau_d >= 0, tau_s >= 0, epsilon_match > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_percent(what: &str, v: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&v) {
        return Err(Error::Range(format!("{what} = {v} is not a percentage in [0, 100]")));
    }
    Ok(())
}

/// Accuracy lost to protection, `a_o - a_p`.
pub fn compute_inconsistency(a_o: f64, a_p: f64) -> Result<f64> {
    check_percent("A_o", a_o)?;
    check_percent("A_p", a_p)?;
    Ok(a_o - a_p)
}

/// Accuracy an attack fails to recover, `a_p - a_t`.
pub fn compute_strength(a_p: f64, a_t: f64) -> Result<f64> {
    check_percent("A_p", a_p)?;
    check_percent("A_t", a_t)?;
    Ok(a_p - a_t)
}

/// Accuracies of one protected model and one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub a_o: f64,
    pub a_p: f64,
    pub inconsistency: f64,
    /// Attacked accuracy per trial.
    pub attacked: Vec<f64>,
    /// Strength per trial.
    pub strengths: Vec<f64>,
    pub strength_mean: f64,
    pub strength_std: f64,
    pub count: usize,
}

impl MetricsRecord {
    pub fn new(a_o: f64, a_p: f64, attacked: &[f64]) -> Result<Self> {
        let inconsistency = compute_inconsistency(a_o, a_p)?;
        let strengths = attacked
            .iter()
            .map(|&a_t| compute_strength(a_p, a_t))
            .collect::<Result<Vec<_>>>()?;
        let (strength_mean, strength_std) = mean_std(&strengths);
        Ok(Self {
            a_o,
            a_p,
            inconsistency,
            attacked: attacked.to_vec(),
            count: strengths.len(),
            strengths,
            strength_mean,
            strength_std,
        })
    }

    /// Largest violation of `I + A_p = A_o` and `S + A_t = A_p` over all trials.
    pub fn identity_error(&self) -> f64 {
        let mut err = (self.inconsistency + self.a_p - self.a_o).abs();
        for (s, a_t) in self.strengths.iter().zip(&self.attacked) {
            err = err.max((s + a_t - self.a_p).abs());
        }
        err
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectionVerdict {
    pub functionality_preserving: bool,
    pub well_protected: bool,
}

/// `|I| < tau_d` and `S > tau_s`, using the mean strength.
pub fn classify_protection(metrics: &MetricsRecord, thresholds: &VerdictThresholds) -> ProtectionVerdict {
    ProtectionVerdict {
        functionality_preserving: metrics.inconsistency.abs() < thresholds.tau_d,
        well_protected: metrics.strength_mean > thresholds.tau_s,
    }
}

/// Re-attaches passport layers of `claimed` kind to a suspect network whose
/// scale/shift are free variables, dropping the ones the kind derives.
pub fn restore_passport_functions(suspect: &Model, claimed: &ModelConfig) -> Result<Model> {
    let kind = claimed
        .passport
        .ok_or_else(|| Error::Verification("claimed architecture has no passport kind".into()))?;
    let s = &suspect.config;
    if s.arch != claimed.arch
        || s.in_channels != claimed.in_channels
        || s.image_size != claimed.image_size
        || s.num_classes != claimed.num_classes
        || s.widths != claimed.widths
        || s.normalize_input != claimed.normalize_input
    {
        return Err(Error::Verification(
            "suspect architecture differs from the claimed protected architecture".into(),
        ));
    }
    let mut restored = suspect.clone();
    let norms: Vec<UnitNorm> = restored
        .units()
        .iter()
        .map(|u| {
            if u.slot.is_some() {
                UnitNorm::Passport(kind)
            } else {
                UnitNorm::Plain
            }
        })
        .collect();
    restored.set_unit_norms(&norms)?;
    restored.config.passport = Some(kind);
    Ok(restored)
}

/// Default corruption grid.
pub const DEFAULT_CURVE_GRID: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_CURVE_SEEDS: usize = 20;

/// Accuracy as a function of the fraction of corrupted passport elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureCurve {
    pub grid: Vec<f64>,
    /// Noise seeds, shared by every grid point.
    pub noise_seeds: Vec<u64>,
    /// `samples[point][seed]`.
    pub samples: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SignatureCurve {
    pub fn evaluations(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Range(format!("curve grid {grid:?} leaves [0, 1]")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Range(format!("curve grid {grid:?} is not strictly ascending")));
    }
    if grid.first() != Some(&0.0) {
        return Err(Error::Range("curve grid must start at 0".into()));
    }
    Ok(())
}

fn curve_at_seeds(
    model: &Model,
    passport: &PassportSet,
    test: &Split,
    grid: &[f64],
    seeds: &[u64],
) -> Result<SignatureCurve> {
    check_grid(grid)?;
    if seeds.is_empty() {
        return Err(Error::Range("signature curve needs at least one noise seed".into()));
    }
    let n = seeds.len();
    let flat = parallel_map(grid.len() * n, worker_count(), |i| {
        let noisy = perturb_passport(passport, grid[i / n], seeds[i % n])?;
        evaluate_accuracy(model, test, Some(&noisy))
    })?;
    let samples: Vec<Vec<f64>> = flat.chunks(n).map(<[f64]>::to_vec).collect();
    let (mean, std) = samples.iter().map(|s| mean_std(s)).unzip();
    Ok(SignatureCurve {
        grid: grid.to_vec(),
        noise_seeds: seeds.to_vec(),
        samples,
        mean,
        std,
    })
}

/// Evaluates `model` under `perturb_passport(passport, c, s)` for every grid
/// point `c` and `seeds_per_point` noise seeds derived from `seed`.
pub fn signature_curve(
    model: &Model,
    passport: &PassportSet,
    test: &Split,
    grid: &[f64],
    seeds_per_point: usize,
    seed: u64,
) -> Result<SignatureCurve> {
    let seeds: Vec<u64> = (0..seeds_per_point)
        .map(|k| derive_seed(seed, &format!("curve/{k}")))
        .collect();
    curve_at_seeds(model, passport, test, grid, &seeds)
}

/// What the owner records when protecting a model, before any dispute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtectionRecord {
    /// Hash of the pre-determined verification test set.
    pub test_set_hash: String,
    /// Accuracy with the true passport.
    pub valid_accuracy: f64,
    pub curve: Option<SignatureCurve>,
}

impl ProtectionRecord {
    pub fn measure(
        model: &Model,
        passport: &PassportSet,
        test: &Split,
        grid: &[f64],
        seeds_per_point: usize,
        seed: u64,
    ) -> Result<Self> {
        let curve = signature_curve(model, passport, test, grid, seeds_per_point, seed)?;
        Ok(Self {
            test_set_hash: test.hash(),
            valid_accuracy: curve.mean[0],
            curve: Some(curve),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePointEvidence {
    pub c: f64,
    pub measured: f64,
    pub recorded_mean: f64,
    pub recorded_std: f64,
    pub deviation: f64,
    pub bound: f64,
    pub within: bool,
}

/// Every measurement behind an ownership verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub test_set_hash: String,
    pub measured_accuracy: f64,
    pub recorded_accuracy: f64,
    pub epsilon_match: f64,
    pub accuracy_match: bool,
    /// Per grid point; absent when the accuracy match already failed.
    pub curve: Option<Vec<CurvePointEvidence>>,
    pub curve_match: Option<bool>,
    pub positive: bool,
}

/// Checks a claimed passport against a suspect network.
///
/// Positive iff the accuracy under the passport matches the recorded one
/// within `epsilon_match`, and at every curve point the mean accuracy under
/// the recorded noise seeds deviates from the recorded mean by at most
/// `epsilon_match + 2 * recorded std`. The curve is only measured once the
/// accuracy matches.
pub fn verify_ownership(
    suspect: &Model,
    passport: &PassportSet,
    record: &ProtectionRecord,
    test: &Split,
    thresholds: &VerdictThresholds,
) -> Result<Evidence> {
    thresholds.validate()?;
    let recorded = record
        .curve
        .as_ref()
        .ok_or_else(|| Error::Verification("no recorded signature curve".into()))?;
    if recorded.mean.len() != recorded.grid.len() || recorded.std.len() != recorded.grid.len() {
        return Err(Error::Verification("recorded signature curve is inconsistent".into()));
    }
    let hash = test.hash();
    if hash != record.test_set_hash {
        return Err(Error::Verification(format!(
            "test set hash {hash} differs from the recorded {}",
            record.test_set_hash
        )));
    }
    let eps = thresholds.epsilon_match;
    let measured = evaluate_accuracy(suspect, test, Some(passport))?;
    let accuracy_match = (measured - record.valid_accuracy).abs() <= eps;
    let mut evidence = Evidence {
        test_set_hash: hash,
        measured_accuracy: measured,
        recorded_accuracy: record.valid_accuracy,
        epsilon_match: eps,
        accuracy_match,
        curve: None,
        curve_match: None,
        positive: false,
    };
    if !accuracy_match {
        return Ok(evidence);
    }
    let curve = curve_at_seeds(suspect, passport, test, &recorded.grid, &recorded.noise_seeds)?;
    let points: Vec<CurvePointEvidence> = (0..recorded.grid.len())
        .map(|i| {
            let deviation = (curve.mean[i] - recorded.mean[i]).abs();
            let bound = eps + 2.0 * recorded.std[i];
            CurvePointEvidence {
                c: recorded.grid[i],
                measured: curve.mean[i],
                recorded_mean: recorded.mean[i],
                recorded_std: recorded.std[i],
                deviation,
                bound,
                within: deviation <= bound,
            }
        })
        .collect();
    let curve_match = points.iter().all(|p| p.within);
    evidence.curve = Some(points);
    evidence.curve_match = Some(curve_match);
    evidence.positive = curve_match;
    Ok(evidence)
}

/// Fixed-width histogram of percentages over [0, 100].
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(samples: &[f64], bin_width: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("histogram of no samples".into()));
        }
        if !(bin_width > 0.0 && bin_width <= 100.0) {
            return Err(Error::Range(format!("bin width {bin_width} outside (0, 100]")));
        }
        let bins = (100.0 / bin_width).ceil() as usize;
        let mut counts = vec![0; bins];
        for &s in samples {
            check_percent("sample", s)?;
            let b = ((s / bin_width).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(Self { bin_width, counts })
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let left = i as f64 * self.bin_width;
        (left, (left + self.bin_width).min(100.0))
    }

    /// Marker comment lines, then `bin_left,bin_right,count` rows.
    pub fn to_csv(&self, a_o: Option<f64>, a_p: Option<f64>) -> String {
        let mut s = String::new();
        for (name, v) in [("A_o", a_o), ("A_p", a_p)] {
            if let Some(v) = v {
                let _ = writeln!(s, "# {name}={v}");
            }
        }
        s.push_str("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (l, r) = self.bin_edges(i);
            let _ = writeln!(s, "{l},{r},{c}");
        }
        s
    }
}

/// Writes the histogram CSV of `samples` to `path`.
pub fn export_histogram(
    samples: &[f64],
    bin_width: f64,
    a_o: Option<f64>,
    a_p: Option<f64>,
    path: &Path,
) -> Result<Histogram> {
    let h = Histogram::new(samples, bin_width)?;
    write_atomic(path, h.to_csv(a_o, a_p).as_bytes())?;
    Ok(h)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Data(
            "spearman needs two equal-length series of at least 2".into(),
        ));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    Ok(cov / (vx * vy).sqrt())
}
