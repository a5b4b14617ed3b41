//! Expected-duration gap scores, thresholds and point-wise metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScoreError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Shape { left: Vec<usize>, right: Vec<usize> },
    #[error("row {row} of {which} is not a distribution (sum {sum})")]
    NotNormalized {
        which: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("the quantile policy needs training scores")]
    NoTrainingScores,
    #[error("the best_f1 policy needs labels")]
    NoLabels,
    #[error("length mismatch: {0} predictions vs {1} labels")]
    Length(usize, usize),
    #[error("invalid threshold policy `{0}` (expected quantile:<q>, fixed:<v> or best_f1)")]
    Policy(String),
}

/// How scores become alarms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ThresholdPolicy {
    /// Quantile `q` of the training-set scores.
    Quantile(f64),
    Fixed(f64),
    /// The cut that maximizes F1 against labels. Evaluation only.
    BestF1,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Quantile(0.99)
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Quantile(q) => write!(f, "quantile:{q}"),
            ThresholdPolicy::Fixed(v) => write!(f, "fixed:{v}"),
            ThresholdPolicy::BestF1 => f.write_str("best_f1"),
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, ScoreError> {
        let bad = || ScoreError::Policy(s.to_string());
        let t = s.trim();
        if t == "best_f1" {
            return Ok(ThresholdPolicy::BestF1);
        }
        let (name, arg) = t
            .split_once(':')
            .or_else(|| t.strip_suffix(')').and_then(|u| u.split_once('(')))
            .ok_or_else(bad)?;
        let value: f64 = arg.trim().parse().map_err(|_| bad())?;
        match name.trim() {
            "quantile" if (0.0..=1.0).contains(&value) => Ok(ThresholdPolicy::Quantile(value)),
            "fixed" if value.is_finite() => Ok(ThresholdPolicy::Fixed(value)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for ThresholdPolicy {
    type Error = ScoreError;

    fn try_from(s: String) -> Result<Self, ScoreError> {
        s.parse()
    }
}

impl From<ThresholdPolicy> for String {
    fn from(p: ThresholdPolicy) -> String {
        p.to_string()
    }
}

fn check_rows(which: &'static str, x: &Tensor) -> Result<(), ScoreError> {
    for t in 0..x.rows() {
        let sum: f64 = x.row(t).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(ScoreError::NotNormalized { which, row: t, sum });
        }
    }
    Ok(())
}

/// `score[t] = E_x[t] - E_recon[t]` under bin midpoints. Positive means the
/// observed tasks are slower than the reconstruction.
pub fn anomaly_score(x: &Tensor, recon: &Tensor, midpoints: &[f64]) -> Result<Vec<f64>, ScoreError> {
    if x.shape() != recon.shape() || x.cols() != midpoints.len() {
        return Err(ScoreError::Shape {
            left: x.shape().to_vec(),
            right: recon.shape().to_vec(),
        });
    }
    check_rows("observed", x)?;
    check_rows("reconstruction", recon)?;
    Ok((0..x.rows())
        .map(|t| {
            let e = |row: &[f64]| row.iter().zip(midpoints).map(|(p, m)| p * m).sum::<f64>();
            e(x.row(t)) - e(recon.row(t))
        })
        .collect())
}

/// Clips negative mass and rescales each row to sum to one. Rows with no
/// positive mass become uniform.
pub fn project_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.dims2();
    let mut out = Tensor::zeros(&[rows, cols]);
    for t in 0..rows {
        let clipped: Vec<f64> = x.row(t).iter().map(|v| v.max(0.0)).collect();
        let total: f64 = clipped.iter().sum();
        let dst = out.row_mut(t);
        if total > 0.0 {
            for (d, c) in dst.iter_mut().zip(&clipped) {
                *d = c / total;
            }
        } else {
            dst.fill(1.0 / cols as f64);
        }
    }
    out
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Flags every score strictly above `threshold`.
pub fn predict(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl Metrics {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
        }
    }
}

/// Marks every labeled segment fully detected when any of its slots is.
pub fn point_adjust(predictions: &[bool], labels: &[bool]) -> Vec<bool> {
    let mut out = predictions.to_vec();
    let mut t = 0;
    while t < labels.len() {
        if !labels[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < labels.len() && labels[t] {
            t += 1;
        }
        if predictions[start..t].iter().any(|&p| p) {
            out[start..t].fill(true);
        }
    }
    out
}

/// Point-wise precision, recall and F1, optionally after point adjustment.
pub fn evaluate(predictions: &[bool], labels: &[bool], adjust: bool) -> Result<Metrics, ScoreError> {
    if predictions.len() != labels.len() {
        return Err(ScoreError::Length(predictions.len(), labels.len()));
    }
    let adjusted;
    let preds = if adjust {
        adjusted = point_adjust(predictions, labels);
        &adjusted
    } else {
        predictions
    };
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_))
}

/// The distinct score value whose cut gives the highest F1, with ties going
/// to the higher threshold. `None` for empty input.
pub fn best_f1(scores: &[f64], labels: &[bool], adjust: bool) -> Result<Option<(f64, Metrics)>, ScoreError> {
    if scores.len() != labels.len() {
        return Err(ScoreError::Length(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Ok(None);
    }
    if adjust {
        let mut cuts = scores.to_vec();
        cuts.sort_by(|a, b| b.total_cmp(a));
        cuts.dedup();
        let mut best: Option<(f64, Metrics)> = None;
        for c in cuts {
            let m = evaluate(&predict(scores, c), labels, true)?;
            if best.is_none_or(|(_, b)| m.f1 > b.f1) {
                best = Some((c, m));
            }
        }
        return Ok(best);
    }

    let positives = labels.iter().filter(|&&l| l).count();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Walk cuts from the highest score down; everything above the cut is flagged.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<(f64, Metrics)> = None;
    let mut k = 0;
    while k < order.len() {
        let cut = scores[order[k]];
        let m = Metrics::from_counts(tp, fp, positives - tp);
        if best.is_none_or(|(_, b)| m.f1 > b.f1) {
            best = Some((cut, m));
        }
        while k < order.len() && scores[order[k]] == cut {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
    }
    Ok(best)
}

/// A resolved threshold and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub policy: ThresholdPolicy,
    pub provenance: String,
}

/// Resolves `policy` to a number. `train_scores` feeds the quantile policy;
/// `scores` and `labels` feed best_f1.
pub fn resolve_threshold(
    policy: ThresholdPolicy,
    train_scores: Option<&[f64]>,
    scores: &[f64],
    labels: Option<&[bool]>,
    adjust: bool,
) -> Result<Threshold, ScoreError> {
    match policy {
        ThresholdPolicy::Fixed(v) => Ok(Threshold {
            value: v,
            policy,
            provenance: format!("fixed value {v}"),
        }),
        ThresholdPolicy::Quantile(q) => {
            let train = train_scores.filter(|s| !s.is_empty()).ok_or(ScoreError::NoTrainingScores)?;
            let value = quantile(train, q).expect("non-empty");
            Ok(Threshold {
                value,
                policy,
                provenance: format!("quantile {q} of {} training scores", train.len()),
            })
        }
        ThresholdPolicy::BestF1 => {
            let labels = labels.ok_or(ScoreError::NoLabels)?;
            let (value, m) = best_f1(scores, labels, adjust)?.unwrap_or((0.0, Metrics::default()));
            Ok(Threshold {
                value,
                policy,
                provenance: format!(
                    "best_f1 sweep over {} scores against labels (eval only), f1 {:.4}",
                    scores.len(),
                    m.f1
                ),
            })
        }
    }
}

/// Scores, the decision rule applied to them and optional metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    pub threshold: Threshold,
    pub predictions: Vec<bool>,
    pub point_adjust: bool,
    pub metrics: Option<Metrics>,
}

impl ScoreReport {
    pub fn build(
        scores: Vec<f64>,
        threshold: Threshold,
        labels: Option<&[bool]>,
        point_adjust: bool,
    ) -> Result<Self, ScoreError> {
        let predictions = predict(&scores, threshold.value);
        let metrics = labels
            .map(|l| evaluate(&predictions, l, point_adjust))
            .transpose()?;
        Ok(Self {
            scores,
            threshold,
            predictions,
            point_adjust,
            metrics,
        })
    }
}
