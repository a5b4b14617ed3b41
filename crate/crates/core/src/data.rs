//! Interval schemes, per-slot duration distributions and labels.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DataError {
    #[error("interval edges must be finite and strictly increasing, got {0:?}")]
    Edges(Vec<f64>),
    #[error("a scheme needs at least {0} edges")]
    TooFewEdges(usize),
    #[error("slot duration must be positive, got {0}")]
    SlotDuration(f64),
    #[error("time span [{0}, {1}) is empty")]
    EmptySpan(f64, f64),
    #[error("invalid durations: {}", format_rows(.0))]
    InvalidDurations(Vec<(usize, f64)>),
    #[error("train fraction must lie in (0, 1), got {0}")]
    TrainFraction(f64),
    #[error("split index {index} leaves an empty side for {len} slots")]
    EmptySplit { index: usize, len: usize },
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("timestamps must increase with a constant step")]
    Timestamps,
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
}

fn format_rows(rows: &[(usize, f64)]) -> String {
    let shown: Vec<String> = rows
        .iter()
        .take(10)
        .map(|(i, d)| format!("row {i} duration {d}"))
        .collect();
    let more = rows.len().saturating_sub(10);
    if more > 0 {
        format!("{} (and {more} more)", shown.join(", "))
    } else {
        shown.join(", ")
    }
}

#[derive(Serialize, Deserialize)]
struct SchemeRepr {
    edges: Vec<f64>,
    overflow: bool,
}

/// Duration bins `[s_d, s_{d+1})` with an optional trailing `[s_last, inf)`
/// bin. Durations are in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemeRepr", into = "SchemeRepr")]
pub struct IntervalScheme {
    edges: Vec<f64>,
    overflow: bool,
    midpoints: Vec<f64>,
}

impl TryFrom<SchemeRepr> for IntervalScheme {
    type Error = DataError;

    fn try_from(r: SchemeRepr) -> Result<Self, DataError> {
        IntervalScheme::new(r.edges, r.overflow)
    }
}

impl From<IntervalScheme> for SchemeRepr {
    fn from(s: IntervalScheme) -> Self {
        SchemeRepr {
            edges: s.edges,
            overflow: s.overflow,
        }
    }
}

pub const SYNC_EDGES: [f64; 14] = [
    0.0, 10.0, 20.0, 30.0, 40.0, 70.0, 110.0, 150.0, 190.0, 230.0, 280.0, 330.0, 380.0, 430.0,
];

pub const MUSTANG_EDGES: [f64; 18] = [
    0.0, 5.0, 10.0, 20.0, 30.0, 40.0, 70.0, 110.0, 150.0, 190.0, 230.0, 280.0, 330.0, 380.0,
    430.0, 900.0, 1200.0, 9000.0,
];

impl IntervalScheme {
    pub fn new(edges: Vec<f64>, overflow: bool) -> Result<Self, DataError> {
        let min_edges = 2;
        if edges.len() < min_edges {
            return Err(DataError::TooFewEdges(min_edges));
        }
        let increasing = edges.windows(2).all(|w| w[0] < w[1]);
        if !increasing || edges.iter().any(|e| !e.is_finite()) {
            return Err(DataError::Edges(edges));
        }
        let mut midpoints: Vec<f64> = edges.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
        if overflow {
            let n = edges.len();
            midpoints.push(edges[n - 1] + (edges[n - 1] - edges[n - 2]) / 2.0);
        }
        Ok(Self {
            edges,
            overflow,
            midpoints,
        })
    }

    /// The synthetic-benchmark scheme, with overflow: 14 bins.
    pub fn sync() -> Self {
        Self::new(SYNC_EDGES.to_vec(), true).expect("static edges are valid")
    }

    /// Same edges as [`IntervalScheme::sync`].
    pub fn ali() -> Self {
        Self::sync()
    }

    /// The long-tail production scheme, with overflow: 18 bins.
    pub fn mustang() -> Self {
        Self::new(MUSTANG_EDGES.to_vec(), true).expect("static edges are valid")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "sync" => Some(Self::sync()),
            "ali" | "ali1" | "ali2" => Some(Self::ali()),
            "mustang" | "mut" => Some(Self::mustang()),
            _ => None,
        }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn has_overflow(&self) -> bool {
        self.overflow
    }

    pub fn dims(&self) -> usize {
        self.midpoints.len()
    }

    pub fn midpoints(&self) -> &[f64] {
        &self.midpoints
    }

    /// Representative duration of the overflow bin, if there is one.
    pub fn overflow_representative(&self) -> Option<f64> {
        self.overflow.then(|| *self.midpoints.last().expect("non-empty"))
    }

    /// Bin index of a duration, or `None` when it falls outside every bin.
    pub fn bin_of(&self, duration: f64) -> Option<usize> {
        let first = self.edges[0];
        let last = *self.edges.last().expect("non-empty");
        if !(duration >= first) {
            return None;
        }
        if duration >= last {
            return self.overflow.then(|| self.dims() - 1);
        }
        // first edge strictly greater than duration, minus one
        Some(self.edges.partition_point(|&e| e <= duration) - 1)
    }

    /// Expected duration of a distribution row under this scheme.
    pub fn expectation(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.midpoints).map(|(p, m)| p * m).sum()
    }
}

/// One finished task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub task_id: String,
    /// Minutes since the epoch.
    pub end_timestamp: f64,
    /// Minutes.
    pub duration: f64,
}

/// A `T x D` matrix of per-slot task counts or proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSeries {
    timestamps: Vec<f64>,
    slot_duration: f64,
    dims: usize,
    counts: Option<Vec<u64>>,
    values: Vec<f64>,
    normalized: bool,
    missing: Vec<bool>,
}

impl DistributionSeries {
    /// A count series. `counts` is row-major `timestamps.len() x dims`.
    pub fn from_counts(
        timestamps: Vec<f64>,
        slot_duration: f64,
        dims: usize,
        counts: Vec<u64>,
    ) -> Result<Self, DataError> {
        check_layout(&timestamps, slot_duration, dims, counts.len())?;
        let values = counts.iter().map(|&c| c as f64).collect();
        let missing = vec![false; timestamps.len()];
        Ok(Self {
            timestamps,
            slot_duration,
            dims,
            counts: Some(counts),
            values,
            normalized: false,
            missing,
        })
    }

    /// A proportion series. Every row must be a distribution within 1e-6.
    /// Rows that are exactly uniform are not treated as missing.
    pub fn from_proportions(
        timestamps: Vec<f64>,
        slot_duration: f64,
        dims: usize,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        check_layout(&timestamps, slot_duration, dims, values.len())?;
        for (row, chunk) in values.chunks(dims.max(1)).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if chunk.iter().any(|v| !(0.0..=1.0 + 1e-9).contains(v)) || (sum - 1.0).abs() > 1e-6 {
                return Err(DataError::Row {
                    row,
                    reason: format!("not a distribution (sum {sum})"),
                });
            }
        }
        let missing = vec![false; timestamps.len()];
        Ok(Self {
            timestamps,
            slot_duration,
            dims,
            counts: None,
            values,
            normalized: true,
            missing,
        })
    }

    /// Marks slots as missing. Only meaningful for normalized series.
    pub fn with_missing(mut self, missing: Vec<bool>) -> Result<Self, DataError> {
        if missing.len() != self.len() {
            return Err(DataError::Length {
                what: "missing flags",
                got: missing.len(),
                expected: self.len(),
            });
        }
        self.missing = missing;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn slot_duration(&self) -> f64 {
        self.slot_duration
    }

    pub fn counts(&self) -> Option<&[u64]> {
        self.counts.as_deref()
    }

    /// Proportions when normalized, raw counts as floats otherwise.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    /// Slots `start..end` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let d = self.dims;
        Self {
            timestamps: self.timestamps[start..end].to_vec(),
            slot_duration: self.slot_duration,
            dims: d,
            counts: self.counts.as_ref().map(|c| c[start * d..end * d].to_vec()),
            values: self.values[start * d..end * d].to_vec(),
            normalized: self.normalized,
            missing: self.missing[start..end].to_vec(),
        }
    }

    /// Per-slot expected duration under `scheme`.
    pub fn expectations(&self, scheme: &IntervalScheme) -> Vec<f64> {
        (0..self.len()).map(|t| scheme.expectation(self.row(t))).collect()
    }
}

fn check_layout(
    timestamps: &[f64],
    slot_duration: f64,
    dims: usize,
    n_values: usize,
) -> Result<(), DataError> {
    if !(slot_duration > 0.0) || !slot_duration.is_finite() {
        return Err(DataError::SlotDuration(slot_duration));
    }
    if n_values != timestamps.len() * dims {
        return Err(DataError::Length {
            what: "values",
            got: n_values,
            expected: timestamps.len() * dims,
        });
    }
    let tol = 1e-9 * slot_duration.max(1.0);
    let steady = timestamps
        .windows(2)
        .all(|w| ((w[1] - w[0]) - slot_duration).abs() <= tol.max(1e-9 * w[1].abs()));
    if !steady {
        return Err(DataError::Timestamps);
    }
    Ok(())
}

/// Per-slot binary slowdown labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelSeries {
    pub labels: Vec<bool>,
}

impl LabelSeries {
    pub fn new(labels: Vec<bool>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn ratio(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.positives() as f64 / self.labels.len() as f64
        }
    }
}

/// What happened to the input rows during binning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub total: usize,
    pub binned: usize,
    pub outside_span: usize,
    pub outside_bins: usize,
    /// Slots that received at least one event.
    pub covered_slots: usize,
    pub slots: usize,
}

/// Counts events into slots of `slot_duration` minutes covering `span`.
/// An event whose end time lies in `[span.0, span.1)` lands in slot
/// `floor((end - span.0) / slot_duration)`.
pub fn bin_events(
    events: &[TaskEvent],
    scheme: &IntervalScheme,
    slot_duration: f64,
    span: (f64, f64),
) -> Result<(DistributionSeries, BinReport), DataError> {
    if !(slot_duration > 0.0) || !slot_duration.is_finite() {
        return Err(DataError::SlotDuration(slot_duration));
    }
    let (start, end) = span;
    if !(end > start) || !start.is_finite() || !end.is_finite() {
        return Err(DataError::EmptySpan(start, end));
    }
    let bad: Vec<(usize, f64)> = events
        .iter()
        .enumerate()
        .filter(|(_, e)| !(e.duration >= 0.0) || !e.duration.is_finite())
        .map(|(i, e)| (i, e.duration))
        .collect();
    if !bad.is_empty() {
        return Err(DataError::InvalidDurations(bad));
    }

    let slots = ((end - start) / slot_duration).ceil() as usize;
    let d = scheme.dims();
    let mut counts = vec![0u64; slots * d];
    let mut report = BinReport {
        total: events.len(),
        slots,
        ..BinReport::default()
    };
    for e in events {
        if !(e.end_timestamp >= start && e.end_timestamp < end) {
            report.outside_span += 1;
            continue;
        }
        let t = (((e.end_timestamp - start) / slot_duration).floor() as usize).min(slots - 1);
        match scheme.bin_of(e.duration) {
            Some(b) => {
                counts[t * d + b] += 1;
                report.binned += 1;
            }
            None => report.outside_bins += 1,
        }
    }
    report.covered_slots = counts.chunks(d).filter(|r| r.iter().any(|&c| c > 0)).count();
    let timestamps = (0..slots).map(|t| start + t as f64 * slot_duration).collect();
    let series = DistributionSeries::from_counts(timestamps, slot_duration, d, counts)?;
    Ok((series, report))
}

/// Row-normalizes counts into proportions. All-zero rows become uniform and
/// are flagged missing. A normalized series is returned unchanged.
pub fn normalize(series: &DistributionSeries) -> DistributionSeries {
    if series.normalized {
        return series.clone();
    }
    let d = series.dims;
    let mut values = Vec::with_capacity(series.values.len());
    let mut missing = Vec::with_capacity(series.len());
    for t in 0..series.len() {
        let row = series.row(t);
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            values.extend(row.iter().map(|v| v / total));
            missing.push(false);
        } else {
            values.extend(std::iter::repeat_n(1.0 / d as f64, d));
            missing.push(true);
        }
    }
    DistributionSeries {
        timestamps: series.timestamps.clone(),
        slot_duration: series.slot_duration,
        dims: d,
        counts: series.counts.clone(),
        values,
        normalized: true,
        missing,
    }
}

pub type Split = (DistributionSeries, LabelSeries);

/// Contiguous prefix split at `floor(T * train_fraction)`.
pub fn split(
    series: &DistributionSeries,
    labels: &LabelSeries,
    train_fraction: f64,
) -> Result<(Split, Split), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::TrainFraction(train_fraction));
    }
    if labels.len() != series.len() {
        return Err(DataError::Length {
            what: "labels",
            got: labels.len(),
            expected: series.len(),
        });
    }
    let t = series.len();
    let index = (t as f64 * train_fraction).floor() as usize;
    if index == 0 || index >= t {
        return Err(DataError::EmptySplit { index, len: t });
    }
    let train = (
        series.slice(0, index),
        LabelSeries::new(labels.labels[..index].to_vec()),
    );
    let test = (
        series.slice(index, t),
        LabelSeries::new(labels.labels[index..].to_vec()),
    );
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn event(end: f64, duration: f64) -> TaskEvent {
        TaskEvent {
            task_id: "t".into(),
            end_timestamp: end,
            duration,
        }
    }

    #[test]
    fn sync_scheme_midpoints() {
        let s = IntervalScheme::sync();
        assert_eq!(s.dims(), 14);
        assert_eq!(
            s.midpoints(),
            &[5.0, 15.0, 25.0, 35.0, 55.0, 90.0, 130.0, 170.0, 210.0, 255.0, 305.0, 355.0, 405.0, 455.0]
        );
        assert_eq!(s.overflow_representative(), Some(455.0));
    }

    #[test]
    fn mustang_scheme_has_overflow() {
        let s = IntervalScheme::mustang();
        assert_eq!(s.dims(), 18);
        assert_eq!(s.overflow_representative(), Some(9000.0 + 7800.0 / 2.0));
        assert_eq!(s.bin_of(20000.0), Some(17));
    }

    #[test]
    fn scheme_without_overflow() {
        let s = IntervalScheme::new(vec![0.0, 10.0, 20.0], false).unwrap();
        assert_eq!(s.dims(), 2);
        assert_eq!(s.bin_of(10.0), Some(1));
        assert_eq!(s.bin_of(20.0), None);
        assert_eq!(s.overflow_representative(), None);
    }

    #[test]
    fn bad_edges_rejected() {
        assert!(IntervalScheme::new(vec![0.0, 10.0, 10.0], true).is_err());
        assert!(IntervalScheme::new(vec![0.0], true).is_err());
        assert!(IntervalScheme::new(vec![0.0, f64::NAN], true).is_err());
    }

    #[test]
    fn scheme_json_roundtrip() {
        let s = IntervalScheme::mustang();
        let json = serde_json::to_string(&s).unwrap();
        let back: IntervalScheme = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<IntervalScheme>(r#"{"edges":[3,1],"overflow":true}"#).is_err());
    }

    #[test]
    fn duration_fifteen_lands_in_second_bin() {
        let (series, report) =
            bin_events(&[event(0.5, 15.0)], &IntervalScheme::sync(), 1.0, (0.0, 1.0)).unwrap();
        assert_eq!(series.counts().unwrap()[1], 1);
        assert_eq!(report.binned, 1);
    }

    #[test]
    fn left_closed_boundary() {
        let s = IntervalScheme::new(vec![0.0, 10.0, 20.0], true).unwrap();
        assert_eq!(s.bin_of(10.0), Some(1));
        assert_eq!(s.bin_of(9.999_999), Some(0));
        assert_eq!(s.bin_of(0.0), Some(0));
    }

    #[test]
    fn empty_events_give_zero_counts() {
        let (series, report) = bin_events(&[], &IntervalScheme::sync(), 5.0, (0.0, 20.0)).unwrap();
        assert_eq!(series.len(), 4);
        assert!(series.counts().unwrap().iter().all(|&c| c == 0));
        assert_eq!(report.covered_slots, 0);
    }

    #[test]
    fn negative_duration_reports_rows() {
        let err = bin_events(
            &[event(0.0, 1.0), event(0.0, -2.0), event(0.0, f64::NAN)],
            &IntervalScheme::sync(),
            1.0,
            (0.0, 1.0),
        )
        .unwrap_err();
        match err {
            DataError::InvalidDurations(rows) => {
                assert_eq!(rows.len(), 2);
                assert_eq!(rows[0], (1, -2.0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_span_events_are_counted() {
        let events = [event(-1.0, 5.0), event(0.0, 5.0), event(10.0, 5.0), event(9.99, 5.0)];
        let (series, report) = bin_events(&events, &IntervalScheme::sync(), 5.0, (0.0, 10.0)).unwrap();
        assert_eq!(report.outside_span, 2);
        assert_eq!(report.binned, 2);
        assert_eq!(series.counts().unwrap().iter().sum::<u64>(), 2);
        assert_eq!(series.timestamps(), &[0.0, 5.0]);
    }

    #[test]
    fn normalize_ratio_and_missing() {
        let series =
            DistributionSeries::from_counts(vec![0.0, 1.0], 1.0, 4, vec![2, 2, 0, 0, 0, 0, 0, 0])
                .unwrap();
        let n = normalize(&series);
        assert_eq!(n.row(0), &[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(n.row(1), &[0.25; 4]);
        assert_eq!(n.missing(), &[false, true]);
        assert_eq!(normalize(&n), n);
    }

    #[test]
    fn split_floor_arithmetic() {
        let series = DistributionSeries::from_counts(
            (0..10).map(f64::from).collect(),
            1.0,
            1,
            vec![1; 10],
        )
        .unwrap();
        let labels = LabelSeries::new(vec![false; 10]);
        let ((tr, trl), (te, tel)) = split(&series, &labels, 0.7).unwrap();
        assert_eq!((tr.len(), te.len(), trl.len(), tel.len()), (7, 3, 7, 3));
        assert_eq!(te.timestamps()[0], 7.0);

        let small = series.slice(0, 3);
        let ((a, _), (b, _)) = split(&small, &LabelSeries::new(vec![false; 3]), 0.7).unwrap();
        assert_eq!((a.len(), b.len()), (2, 1));

        assert!(split(&series, &LabelSeries::new(vec![false; 9]), 0.7).is_err());
        assert!(split(&series, &labels, 0.05).is_err());
        assert!(split(&series, &labels, 1.0).is_err());
    }

    #[test]
    fn uneven_timestamps_rejected() {
        assert_eq!(
            DistributionSeries::from_counts(vec![0.0, 1.0, 3.0], 1.0, 1, vec![1, 1, 1]),
            Err(DataError::Timestamps)
        );
    }

    proptest! {
        #[test]
        fn binning_conserves_mass(
            raw in prop::collection::vec((-50.0f64..150.0, 0.0f64..2000.0), 0..200),
            slot in 1.0f64..20.0,
        ) {
            let events: Vec<TaskEvent> = raw.iter().map(|&(e, d)| event(e, d)).collect();
            let scheme = IntervalScheme::sync();
            let (series, report) = bin_events(&events, &scheme, slot, (0.0, 100.0)).unwrap();
            let in_span = raw.iter().filter(|(e, _)| (0.0..100.0).contains(e)).count();
            let total: u64 = series.counts().unwrap().iter().sum();
            prop_assert_eq!(total as usize, in_span);
            prop_assert_eq!(report.binned + report.outside_span + report.outside_bins, events.len());
        }

        #[test]
        fn normalized_expectation_within_midpoints(
            counts in prop::collection::vec(0u64..50, 14 * 6),
        ) {
            let scheme = IntervalScheme::sync();
            let series = DistributionSeries::from_counts(
                (0..6).map(f64::from).collect(), 1.0, 14, counts).unwrap();
            let n = normalize(&series);
            let m = scheme.midpoints();
            for t in 0..n.len() {
                let row = n.row(t);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                let e = scheme.expectation(row);
                prop_assert!(e >= m[0] - 1e-9 && e <= m[13] + 1e-9);
            }
            prop_assert_eq!(normalize(&n), n);
        }
    }
}
