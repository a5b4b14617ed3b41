use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use serde::Serialize;

use sorn_core::data::{bin_events, normalize, BinReport, DistributionSeries, IntervalScheme, LabelSeries};
use sorn_core::io::{self, ScoreRow};
use sorn_core::model::SornModel;
use sorn_core::score::{evaluate, resolve_threshold, Metrics, ScoreError, ScoreReport, Threshold, ThresholdPolicy};
use sorn_core::synth;
use sorn_core::theorem::{self, DominanceReport, GridReport};
use sorn_core::train::{self, ModelCheckpoint, TrainError, TrainHistory};

use crate::config::{Overrides, RunConfig};

/// Largest share of malformed event rows that ingestion tolerates.
const MAX_MALFORMED: f64 = 0.01;

#[derive(Debug)]
pub enum Failure {
    /// Bad input or configuration; exit code 2.
    Invalid(anyhow::Error),
    /// Anything else; exit code 1.
    Internal(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 2,
            Failure::Internal(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Invalid(e) | Failure::Internal(e) => e,
        }
    }
}

pub type Outcome = Result<(), Failure>;

pub trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }

    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Internal(e.into()))
    }
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .internal()
}

fn parent(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// `dir/scores.csv` becomes `dir/scores.<suffix>`.
fn beside(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parent(path).join(format!("{stem}.{suffix}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    io::write_json(path, value)
        .with_context(|| format!("writing {}", path.display()))
        .internal()
}

fn load_series(path: &Path) -> Result<(DistributionSeries, IntervalScheme), Failure> {
    io::load_series(path)
        .with_context(|| format!("loading series {}", path.display()))
        .invalid()
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))
        .invalid()?;
    ModelCheckpoint::from_json(&text)
        .with_context(|| format!("parsing checkpoint {}", path.display()))
        .invalid()
}

fn check_scheme(model: &IntervalScheme, series: &IntervalScheme) -> Outcome {
    if model != series {
        return Err(Failure::Invalid(anyhow!(
            "checkpoint scheme ({} bins, edges {:?}, overflow {}) does not match the series ({} bins, edges {:?}, overflow {})",
            model.dims(),
            model.edges(),
            model.has_overflow(),
            series.dims(),
            series.edges(),
            series.has_overflow()
        )));
    }
    Ok(())
}

fn prefix_len(len: usize, fraction: f64) -> usize {
    (len as f64 * fraction).floor() as usize
}

/// Labels for each timestamp, matched exactly.
fn align_labels(timestamps: &[f64], label_times: &[f64], labels: &LabelSeries) -> Result<Vec<bool>, Failure> {
    let lookup: HashMap<u64, bool> = label_times
        .iter()
        .zip(&labels.labels)
        .map(|(t, &l)| (t.to_bits(), l))
        .collect();
    timestamps
        .iter()
        .map(|t| {
            lookup
                .get(&t.to_bits())
                .copied()
                .ok_or_else(|| Failure::Invalid(anyhow!("no label for timestamp {t}")))
        })
        .collect()
}

pub fn generate(out: &Path, overrides: &Overrides, env_seed: Option<String>) -> Outcome {
    let cfg = overrides.resolve(env_seed).invalid()?;
    let spec = cfg.synth_spec().invalid()?;
    let ds = synth::generate(&spec).invalid()?;
    create_dir(out)?;
    io::save_series(&out.join("series.csv"), &ds.series, &spec.scheme).internal()?;
    io::save_labels(&out.join("labels.csv"), ds.series.timestamps(), &ds.labels).internal()?;
    write_json(&out.join("scheme.json"), &spec.scheme)?;
    write_json(&out.join("spec.json"), &spec)?;
    cfg.write_beside(out, "config.json").internal()?;
    println!(
        "generated {} slots, {} bins, {} anomalous ({:.2}%) in {}",
        ds.series.len(),
        ds.series.dims(),
        ds.labels.positives(),
        100.0 * ds.labels.ratio(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct IngestReport {
    rows: usize,
    dropped: usize,
    malformed: Vec<io::RowIssue>,
    span: Option<(f64, f64)>,
    binning: Option<BinReport>,
}

pub fn ingest(
    events: &Path,
    out: &Path,
    start: Option<f64>,
    end: Option<f64>,
    overrides: &Overrides,
    env_seed: Option<String>,
) -> Outcome {
    let cfg = overrides.resolve(env_seed).invalid()?;
    let scheme = cfg.scheme.resolve().invalid()?;
    let file = io::read_events_file(events)
        .with_context(|| format!("reading events {}", events.display()))
        .invalid()?;
    for issue in &file.issues {
        eprintln!("{}:{}: {}", events.display(), issue.line, issue.reason);
    }
    let fraction = file.malformed_fraction();
    if fraction > MAX_MALFORMED {
        return Err(Failure::Invalid(anyhow!(
            "{} of {} rows malformed ({:.2}% > {:.0}%)",
            file.issues.len(),
            file.rows(),
            100.0 * fraction,
            100.0 * MAX_MALFORMED
        )));
    }
    let slot = cfg.slot_duration;
    let ends = || file.events.iter().map(|e| e.end_timestamp);
    let span = match (start, end) {
        (Some(s), Some(e)) => Some((s, e)),
        _ if file.events.is_empty() => None,
        (s, e) => {
            let lo = ends().fold(f64::INFINITY, f64::min);
            let hi = ends().fold(f64::NEG_INFINITY, f64::max);
            let s = s.unwrap_or((lo / slot).floor() * slot);
            let e = e.unwrap_or(s + ((hi - s) / slot).floor() * slot + slot);
            Some((s, e))
        }
    };
    let (series, binning) = match span {
        Some(span) => {
            let (series, report) = bin_events(&file.events, &scheme, slot, span).invalid()?;
            (series, Some(report))
        }
        None => {
            eprintln!("warning: {} holds no events; writing an empty series", events.display());
            let series = DistributionSeries::from_counts(Vec::new(), slot, scheme.dims(), Vec::new()).invalid()?;
            (series, None)
        }
    };
    create_dir(&parent(out))?;
    io::save_series(out, &series, &scheme).internal()?;
    let report = IngestReport {
        rows: file.rows(),
        dropped: file.issues.len() + binning.as_ref().map_or(0, |b| b.total - b.binned),
        malformed: file.issues.clone(),
        span,
        binning,
    };
    write_json(&beside(out, "report.json"), &report)?;
    cfg.write_beside(&parent(out), &format!("{}.config.json", stem(out))).internal()?;
    println!(
        "ingested {} rows into {} slots ({} dropped)",
        report.rows,
        series.len(),
        report.dropped
    );
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn train_error(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) | TrainError::NotNormalized | TrainError::Dims { .. } | TrainError::NoWindows { .. } => {
            Failure::Invalid(e.into())
        }
        other => Failure::Internal(other.into()),
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    series: PathBuf,
    training_slots: usize,
    history: TrainHistory,
    gate_widths: Vec<f64>,
    trust_width: f64,
}

fn train_one(series_path: &Path, out: &Path, cfg: &RunConfig) -> Outcome {
    let (series, scheme) = load_series(series_path)?;
    let series = normalize(&series);
    let n = if cfg.train_fraction >= 1.0 {
        series.len()
    } else {
        prefix_len(series.len(), cfg.train_fraction)
    };
    if n == 0 {
        return Err(Failure::Invalid(anyhow!(
            "{}: training prefix is empty ({} slots, fraction {})",
            series_path.display(),
            series.len(),
            cfg.train_fraction
        )));
    }
    let prefix = series.slice(0, n);
    let mut model = SornModel::new(scheme, cfg.train_config()).invalid()?;
    let history = train::train(&mut model, &prefix).map_err(train_error)?;
    let train_scores = model.score(&prefix).internal()?;
    let ckpt = model.to_checkpoint(train_scores).internal()?;
    create_dir(out)?;
    let text = ckpt.to_json().internal()?;
    std::fs::write(out.join("model.json"), text)
        .with_context(|| format!("writing {}", out.join("model.json").display()))
        .internal()?;
    let summary = TrainSummary {
        series: series_path.to_path_buf(),
        training_slots: n,
        history,
        gate_widths: model.gate_widths().to_vec(),
        trust_width: model.trust_width(),
    };
    write_json(&out.join("history.json"), &summary)?;
    cfg.write_beside(out, "config.json").internal()?;
    println!(
        "{}: trained on {} slots for {} epochs, final loss {:.6}",
        series_path.display(),
        n,
        summary.history.loss.len(),
        summary.history.loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn train(
    series: &[PathBuf],
    out: &Path,
    parallel: usize,
    overrides: &Overrides,
    env_seed: Option<String>,
) -> Outcome {
    let cfg = overrides.resolve(env_seed).invalid()?;
    if parallel == 0 {
        return Err(Failure::Invalid(anyhow!("--parallel-subsets must be at least 1")));
    }
    if series.len() == 1 {
        return train_one(&series[0], out, &cfg);
    }
    let mut targets: Vec<PathBuf> = Vec::with_capacity(series.len());
    for s in series {
        let dir = out.join(stem(s));
        if targets.contains(&dir) {
            return Err(Failure::Invalid(anyhow!("two series share the stem {:?}", stem(s))));
        }
        targets.push(dir);
    }
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(usize, Failure)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..parallel.min(series.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= series.len() {
                    break;
                }
                if let Err(f) = train_one(&series[i], &targets[i], &cfg) {
                    failures.lock().expect("no poisoned lock").push((i, f));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("no poisoned lock");
    failures.sort_by_key(|(i, _)| *i);
    for (i, f) in &failures {
        eprintln!("{}: {:#}", series[*i].display(), f.error());
    }
    match failures.into_iter().next() {
        Some((_, f)) => Err(f),
        None => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct ScoreSummary {
    model: PathBuf,
    series: PathBuf,
    first_slot: usize,
    slots: usize,
    threshold: Threshold,
    point_adjust: bool,
    metrics: Option<Metrics>,
}

fn threshold_error(e: ScoreError) -> Failure {
    match e {
        ScoreError::NoLabels | ScoreError::NoTrainingScores => Failure::Invalid(e.into()),
        other => Failure::Internal(other.into()),
    }
}

pub fn score(
    model_path: &Path,
    series_path: &Path,
    out: &Path,
    labels_path: Option<&Path>,
    test_only: bool,
    overrides: &Overrides,
    env_seed: Option<String>,
) -> Outcome {
    let ckpt = load_checkpoint(model_path)?;
    let cfg = overrides
        .resolve_with(RunConfig::with_train(&ckpt.config), env_seed)
        .invalid()?;
    let (series, scheme) = load_series(series_path)?;
    check_scheme(&ckpt.scheme, &scheme)?;
    let model = SornModel::from_checkpoint(&ckpt).invalid()?;
    let series = normalize(&series);
    let first = if test_only {
        prefix_len(series.len(), cfg.train_fraction)
    } else {
        0
    };
    let scored = series.slice(first, series.len());
    let scores = model.score(&scored).internal()?;
    let labels = match labels_path {
        Some(p) => {
            let (times, labels) = io::load_labels(p)
                .with_context(|| format!("loading labels {}", p.display()))
                .invalid()?;
            Some(align_labels(scored.timestamps(), &times, &labels)?)
        }
        None => None,
    };
    let threshold = resolve_threshold(
        cfg.threshold_policy,
        Some(&ckpt.train_scores),
        &scores,
        labels.as_deref(),
        cfg.point_adjust,
    )
    .map_err(threshold_error)?;
    let report = ScoreReport::build(scores, threshold, labels.as_deref(), cfg.point_adjust).internal()?;
    let rows: Vec<ScoreRow> = scored
        .timestamps()
        .iter()
        .zip(&report.scores)
        .zip(&report.predictions)
        .map(|((&timestamp, &score), &prediction)| ScoreRow {
            timestamp,
            score,
            prediction,
        })
        .collect();
    create_dir(&parent(out))?;
    io::save_scores(out, &rows).internal()?;
    let summary = ScoreSummary {
        model: model_path.to_path_buf(),
        series: series_path.to_path_buf(),
        first_slot: first,
        slots: rows.len(),
        threshold: report.threshold.clone(),
        point_adjust: report.point_adjust,
        metrics: report.metrics,
    };
    write_json(&beside(out, "report.json"), &summary)?;
    cfg.write_beside(&parent(out), &format!("{}.config.json", stem(out))).internal()?;
    println!(
        "scored {} slots, threshold {} ({})",
        rows.len(),
        summary.threshold.value,
        summary.threshold.provenance
    );
    if let Some(m) = &summary.metrics {
        println!("precision {:.4} recall {:.4} f1 {:.4}", m.precision, m.recall, m.f1);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    slots: usize,
    positives: usize,
    point_adjust: bool,
    /// Absent when the predictions stored in the score file were used.
    threshold: Option<Threshold>,
    metrics: Metrics,
}

pub fn eval(
    scores_path: &Path,
    labels_path: &Path,
    model_path: Option<&Path>,
    out: Option<&Path>,
    overrides: &Overrides,
    env_seed: Option<String>,
) -> Outcome {
    let ckpt = model_path.map(load_checkpoint).transpose()?;
    let base = ckpt
        .as_ref()
        .map_or_else(RunConfig::default, |c| RunConfig::with_train(&c.config));
    let cfg = overrides.resolve_with(base, env_seed).invalid()?;
    let rows = io::load_scores(scores_path)
        .with_context(|| format!("loading scores {}", scores_path.display()))
        .invalid()?;
    let (times, labels) = io::load_labels(labels_path)
        .with_context(|| format!("loading labels {}", labels_path.display()))
        .invalid()?;
    let timestamps: Vec<f64> = rows.iter().map(|r| r.timestamp).collect();
    let labels = align_labels(&timestamps, &times, &labels)?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();

    let explicit = overrides.sets("threshold_policy").invalid()? || ckpt.is_some();
    let (threshold, predictions) = if explicit {
        let train_scores = ckpt.as_ref().map(|c| c.train_scores.as_slice());
        if matches!(cfg.threshold_policy, ThresholdPolicy::Quantile(_)) && train_scores.is_none() {
            return Err(Failure::Invalid(anyhow!("the quantile policy needs --model for training scores")));
        }
        let t = resolve_threshold(cfg.threshold_policy, train_scores, &scores, Some(&labels), cfg.point_adjust)
            .map_err(threshold_error)?;
        let preds = sorn_core::score::predict(&scores, t.value);
        (Some(t), preds)
    } else {
        (None, rows.iter().map(|r| r.prediction).collect())
    };
    let metrics = evaluate(&predictions, &labels, cfg.point_adjust).internal()?;
    let report = EvalReport {
        slots: rows.len(),
        positives: labels.iter().filter(|&&l| l).count(),
        point_adjust: cfg.point_adjust,
        threshold,
        metrics,
    };
    if let Some(t) = &report.threshold {
        eprintln!("threshold {} from {}", t.value, t.provenance);
    }
    println!("{}", serde_json::to_string_pretty(&report).internal()?);
    if let Some(out) = out {
        create_dir(&parent(out))?;
        write_json(out, &report)?;
        cfg.write_beside(&parent(out), &format!("{}.config.json", stem(out))).internal()?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TheoremReport {
    tolerance: f64,
    two_tone: GridReport,
    fourier: GridReport,
    dominance_checked: usize,
    dominance_failures: Vec<DominanceReport>,
    /// Applicable cases where the peak is near but not on a multiple.
    dominance_inexact: usize,
    passed: bool,
}

pub fn verify_theorems(
    out: Option<&Path>,
    points: usize,
    steps: usize,
    signals: usize,
    tolerance: f64,
    overrides: &Overrides,
    env_seed: Option<String>,
) -> Outcome {
    let cfg = overrides.resolve(env_seed).invalid()?;
    if points == 0 || steps < 2 {
        return Err(Failure::Invalid(anyhow!("need at least one lag and two intervals")));
    }
    let two_tone = theorem::verify_two_tone_grid(points, steps);
    let fourier = theorem::verify_fourier_random(signals, 5, 50, 1.0, steps, cfg.seed);
    let dominance = theorem::dominance_grid();
    let dominance_checked = dominance.iter().filter(|r| r.applicable()).count();
    let dominance_inexact = dominance.iter().filter(|r| r.applicable() && !r.exact).count();
    let dominance_failures: Vec<DominanceReport> = dominance.into_iter().filter(|r| !r.holds()).collect();
    let passed = two_tone.worst_error <= tolerance && fourier.worst_error <= tolerance && dominance_failures.is_empty();
    let report = TheoremReport {
        tolerance,
        two_tone,
        fourier,
        dominance_checked,
        dominance_failures,
        dominance_inexact,
        passed,
    };
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "{} two-tone closed form: {} signals, {} lags, worst error {:.3e}",
        verdict(report.two_tone.worst_error <= tolerance),
        report.two_tone.signals,
        report.two_tone.comparisons,
        report.two_tone.worst_error
    );
    println!(
        "{} general closed form: {} signals, {} lags, worst error {:.3e}",
        verdict(report.fourier.worst_error <= tolerance),
        report.fourier.signals,
        report.fourier.comparisons,
        report.fourier.worst_error
    );
    println!(
        "{} louder-period dominance: {} cases, {} off-multiple by a small offset",
        verdict(report.dominance_failures.is_empty()),
        report.dominance_checked,
        report.dominance_inexact
    );
    if let Some(out) = out {
        create_dir(&parent(out))?;
        write_json(out, &report)?;
        cfg.write_beside(&parent(out), &format!("{}.config.json", stem(out))).internal()?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Internal(anyhow!("theorem checks failed")))
    }
}
