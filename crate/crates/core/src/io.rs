//! CSV and JSON file formats.
//!
//! Floats are written with the shortest representation that parses back to
//! the same bits, so every write/read pair here round-trips exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataError, DistributionSeries, IntervalScheme, LabelSeries, TaskEvent};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {error}")]
    File {
        path: String,
        error: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("bad header: expected {expected}, found {found}")]
    Header { expected: String, found: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<std::io::Error> for IoError {
    fn from(source: std::io::Error) -> Self {
        IoError::File {
            path: String::from("<stream>"),
            error: source,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|source| IoError::File {
        path: path.display().to_string(),
        error: source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(|source| IoError::File {
        path: path.display().to_string(),
        error: source,
    })
}

fn parse_f64(field: &str, line: u64, what: &str) -> Result<f64, IoError> {
    field.trim().parse::<f64>().map_err(|_| IoError::Parse {
        line,
        reason: format!("{what} `{field}` is not a number"),
    })
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

/// A row of the events file that could not be used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowIssue {
    pub line: u64,
    pub reason: String,
}

/// Parsed events plus every malformed row, in file order.
#[derive(Debug, Clone, Default)]
pub struct EventsFile {
    pub events: Vec<TaskEvent>,
    pub issues: Vec<RowIssue>,
}

impl EventsFile {
    pub fn rows(&self) -> usize {
        self.events.len() + self.issues.len()
    }

    pub fn malformed_fraction(&self) -> f64 {
        if self.rows() == 0 {
            0.0
        } else {
            self.issues.len() as f64 / self.rows() as f64
        }
    }
}

pub const EVENTS_HEADER: [&str; 3] = ["task_id", "end_timestamp", "duration_min"];

/// Reads `task_id,end_timestamp,duration_min`. Malformed rows, including
/// negative durations, are collected rather than fatal.
pub fn read_events<R: Read>(reader: R) -> Result<EventsFile, IoError> {
    let mut csv = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = csv.headers()?.clone();
    if !header.is_empty() && header.iter().map(str::trim).ne(EVENTS_HEADER) {
        return Err(IoError::Header {
            expected: EVENTS_HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut out = EventsFile::default();
    for record in csv.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                out.issues.push(RowIssue {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = line_of(&record);
        if record.len() != 3 {
            out.issues.push(RowIssue {
                line,
                reason: format!("expected 3 fields, found {}", record.len()),
            });
            continue;
        }
        let parsed = parse_f64(&record[1], line, "end_timestamp")
            .and_then(|end| parse_f64(&record[2], line, "duration_min").map(|d| (end, d)));
        match parsed {
            Ok((end, duration)) if duration >= 0.0 && duration.is_finite() && end.is_finite() => {
                out.events.push(TaskEvent {
                    task_id: record[0].to_string(),
                    end_timestamp: end,
                    duration,
                });
            }
            Ok((_, duration)) => out.issues.push(RowIssue {
                line,
                reason: format!("invalid duration {duration}"),
            }),
            Err(IoError::Parse { reason, .. }) => out.issues.push(RowIssue { line, reason }),
            Err(other) => return Err(other),
        }
    }
    Ok(out)
}

pub fn read_events_file(path: &Path) -> Result<EventsFile, IoError> {
    read_events(open(path)?)
}

pub fn write_events<W: Write>(writer: W, events: &[TaskEvent]) -> Result<(), IoError> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(EVENTS_HEADER)?;
    for e in events {
        csv.write_record([
            e.task_id.clone(),
            e.end_timestamp.to_string(),
            e.duration.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// The JSON sidecar of a series CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesMeta {
    pub scheme: IntervalScheme,
    pub slot_duration: f64,
    pub normalized: bool,
    /// Slot indices flagged missing.
    #[serde(default)]
    pub missing: Vec<usize>,
}

impl SeriesMeta {
    pub fn of(series: &DistributionSeries, scheme: &IntervalScheme) -> Self {
        Self {
            scheme: scheme.clone(),
            slot_duration: series.slot_duration(),
            normalized: series.is_normalized(),
            missing: series
                .missing()
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect(),
        }
    }
}

fn series_header(dims: usize) -> Vec<String> {
    std::iter::once("timestamp".to_string())
        .chain((0..dims).map(|d| format!("bin_{d}")))
        .collect()
}

/// Writes `timestamp,bin_0,...`. Count series are written as integers.
pub fn write_series<W: Write>(writer: W, series: &DistributionSeries) -> Result<(), IoError> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(series_header(series.dims()))?;
    let d = series.dims();
    for (t, ts) in series.timestamps().iter().enumerate() {
        let mut row = Vec::with_capacity(d + 1);
        row.push(ts.to_string());
        match (series.counts(), series.is_normalized()) {
            (Some(c), false) => row.extend(c[t * d..(t + 1) * d].iter().map(u64::to_string)),
            _ => row.extend(series.row(t).iter().map(f64::to_string)),
        }
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Reads a series CSV using its sidecar for slot length and interpretation.
pub fn read_series<R: Read>(reader: R, meta: &SeriesMeta) -> Result<DistributionSeries, IoError> {
    let mut csv = csv::Reader::from_reader(reader);
    let header = csv.headers()?.clone();
    let dims = meta.scheme.dims();
    let expected = series_header(dims);
    if header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(IoError::Header {
            expected: expected.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut timestamps = Vec::new();
    let mut counts = Vec::new();
    let mut values = Vec::new();
    for record in csv.records() {
        let record = record?;
        let line = line_of(&record);
        timestamps.push(parse_f64(&record[0], line, "timestamp")?);
        for field in record.iter().skip(1) {
            if meta.normalized {
                values.push(parse_f64(field, line, "proportion")?);
            } else {
                counts.push(field.trim().parse::<u64>().map_err(|_| IoError::Parse {
                    line,
                    reason: format!("count `{field}` is not a non-negative integer"),
                })?);
            }
        }
    }
    let series = if meta.normalized {
        DistributionSeries::from_proportions(timestamps, meta.slot_duration, dims, values)?
    } else {
        DistributionSeries::from_counts(timestamps, meta.slot_duration, dims, counts)?
    };
    let mut missing = vec![false; series.len()];
    for &i in &meta.missing {
        if i >= missing.len() {
            return Err(IoError::Parse {
                line: 0,
                reason: format!("missing-slot index {i} beyond series length"),
            });
        }
        missing[i] = true;
    }
    Ok(series.with_missing(missing)?)
}

/// Writes `<stem>.csv` and `<stem>.json` side by side.
pub fn save_series(
    csv_path: &Path,
    series: &DistributionSeries,
    scheme: &IntervalScheme,
) -> Result<(), IoError> {
    let mut w = create(csv_path)?;
    write_series(&mut w, series)?;
    w.flush()?;
    write_json(&sidecar_path(csv_path), &SeriesMeta::of(series, scheme))
}

pub fn load_series(csv_path: &Path) -> Result<(DistributionSeries, IntervalScheme), IoError> {
    let meta: SeriesMeta = read_json(&sidecar_path(csv_path))?;
    let series = read_series(open(csv_path)?, &meta)?;
    Ok((series, meta.scheme))
}

/// `series.csv` pairs with `series.json`.
pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}

pub fn write_labels<W: Write>(
    writer: W,
    timestamps: &[f64],
    labels: &LabelSeries,
) -> Result<(), IoError> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["timestamp", "label"])?;
    for (ts, &l) in timestamps.iter().zip(&labels.labels) {
        csv.write_record([ts.to_string(), u8::from(l).to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_labels<R: Read>(reader: R) -> Result<(Vec<f64>, LabelSeries), IoError> {
    let mut csv = csv::Reader::from_reader(reader);
    let mut timestamps = Vec::new();
    let mut labels = Vec::new();
    for record in csv.records() {
        let record = record?;
        let line = line_of(&record);
        if record.len() != 2 {
            return Err(IoError::Parse {
                line,
                reason: "expected timestamp,label".into(),
            });
        }
        timestamps.push(parse_f64(&record[0], line, "timestamp")?);
        labels.push(match record[1].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(IoError::Parse {
                    line,
                    reason: format!("label `{other}` is not 0 or 1"),
                })
            }
        });
    }
    Ok((timestamps, LabelSeries::new(labels)))
}

pub fn save_labels(path: &Path, timestamps: &[f64], labels: &LabelSeries) -> Result<(), IoError> {
    let mut w = create(path)?;
    write_labels(&mut w, timestamps, labels)?;
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<(Vec<f64>, LabelSeries), IoError> {
    read_labels(open(path)?)
}

/// One row of a score file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub timestamp: f64,
    pub score: f64,
    pub prediction: bool,
}

pub fn write_scores<W: Write>(writer: W, rows: &[ScoreRow]) -> Result<(), IoError> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["timestamp", "score", "prediction"])?;
    for r in rows {
        csv.write_record([
            r.timestamp.to_string(),
            r.score.to_string(),
            u8::from(r.prediction).to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_scores<R: Read>(reader: R) -> Result<Vec<ScoreRow>, IoError> {
    let mut csv = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for record in csv.records() {
        let record = record?;
        let line = line_of(&record);
        if record.len() != 3 {
            return Err(IoError::Parse {
                line,
                reason: "expected timestamp,score,prediction".into(),
            });
        }
        out.push(ScoreRow {
            timestamp: parse_f64(&record[0], line, "timestamp")?,
            score: parse_f64(&record[1], line, "score")?,
            prediction: record[2].trim() == "1",
        });
    }
    Ok(out)
}

pub fn save_scores(path: &Path, rows: &[ScoreRow]) -> Result<(), IoError> {
    let mut w = create(path)?;
    write_scores(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRow>, IoError> {
    read_scores(open(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_reader(open(path)?)?)
}
