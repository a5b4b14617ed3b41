//! SVG line charts of scores, reconstructions and trust weights.

use std::path::Path;

use anyhow::{anyhow, Context};
use plotters::prelude::*;

use sorn_core::data::normalize;
use sorn_core::diff::Tensor;
use sorn_core::io;
use sorn_core::model::SornModel;
use sorn_core::score::project_rows;

use crate::commands::{Classify, Failure, Outcome};

struct Trace<'a> {
    label: &'a str,
    values: &'a [f64],
    color: RGBColor,
}

fn bounds(traces: &[Trace]) -> (f64, f64) {
    let (lo, hi) = traces
        .iter()
        .flat_map(|t| t.values.iter().copied())
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn line_chart(path: &Path, title: &str, y_label: &str, traces: &[Trace], marks: &[(usize, f64)]) -> anyhow::Result<()> {
    let len = traces.iter().map(|t| t.values.len()).max().unwrap_or(0).max(2);
    let (lo, hi) = bounds(traces);
    let root = SVGBackend::new(path, (1200, 400)).into_drawing_area();
    let draw = |e: &dyn std::fmt::Display| anyhow!("drawing {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| draw(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..(len - 1) as f64, lo..hi)
        .map_err(|e| draw(&e))?;
    chart
        .configure_mesh()
        .x_desc("slot")
        .y_desc(y_label)
        .draw()
        .map_err(|e| draw(&e))?;
    for trace in traces {
        let color = trace.color;
        chart
            .draw_series(LineSeries::new(
                trace.values.iter().enumerate().map(|(i, &v)| (i as f64, v)),
                color,
            ))
            .map_err(|e| draw(&e))?
            .label(trace.label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    if !marks.is_empty() {
        chart
            .draw_series(marks.iter().map(|&(i, v)| Circle::new((i as f64, v), 3, RED.filled())))
            .map_err(|e| draw(&e))?
            .label("labeled anomaly")
            .legend(|(x, y)| Circle::new((x + 10, y), 3, RED.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw(&e))?;
    root.present().map_err(|e| draw(&e))?;
    Ok(())
}

pub fn export(
    scores_path: &Path,
    out: &Path,
    labels_path: Option<&Path>,
    model_path: Option<&Path>,
    series_path: Option<&Path>,
) -> Outcome {
    let rows = io::load_scores(scores_path)
        .with_context(|| format!("loading scores {}", scores_path.display()))
        .invalid()?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let mut marks = Vec::new();
    if let Some(p) = labels_path {
        let (times, labels) = io::load_labels(p)
            .with_context(|| format!("loading labels {}", p.display()))
            .invalid()?;
        let flagged: std::collections::HashSet<u64> = times
            .iter()
            .zip(&labels.labels)
            .filter(|(_, &l)| l)
            .map(|(t, _)| t.to_bits())
            .collect();
        marks = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| flagged.contains(&r.timestamp.to_bits()))
            .map(|(i, r)| (i, r.score))
            .collect();
    }
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .internal()?;
    let mut written = vec![out.join("scores.svg")];
    line_chart(
        &written[0],
        "Anomaly score",
        "minutes",
        &[Trace {
            label: "score",
            values: &scores,
            color: BLUE,
        }],
        &marks,
    )
    .internal()?;

    if let (Some(model_path), Some(series_path)) = (model_path, series_path) {
        let text = std::fs::read_to_string(model_path)
            .with_context(|| format!("reading checkpoint {}", model_path.display()))
            .invalid()?;
        let ckpt = sorn_core::train::ModelCheckpoint::from_json(&text).invalid()?;
        let (series, scheme) = io::load_series(series_path)
            .with_context(|| format!("loading series {}", series_path.display()))
            .invalid()?;
        if scheme != ckpt.scheme {
            return Err(Failure::Invalid(anyhow!("checkpoint and series use different interval schemes")));
        }
        let model = SornModel::from_checkpoint(&ckpt).invalid()?;
        let series = normalize(&series);
        let x = Tensor::new(vec![series.len(), series.dims()], series.values().to_vec()).internal()?;
        let rec = model.reconstruct(&x).internal()?;
        let projected = project_rows(&rec.adjusted);
        let observed = series.expectations(&scheme);
        let expected: Vec<f64> = (0..projected.rows()).map(|i| scheme.expectation(projected.row(i))).collect();
        let path = out.join("reconstruction.svg");
        line_chart(
            &path,
            "Expected duration",
            "minutes",
            &[
                Trace {
                    label: "observed",
                    values: &observed,
                    color: BLACK,
                },
                Trace {
                    label: "reconstructed",
                    values: &expected,
                    color: BLUE,
                },
            ],
            &[],
        )
        .internal()?;
        written.push(path);
        let trust = model.slot_trust(&x).internal()?;
        let path = out.join("trust.svg");
        line_chart(
            &path,
            "Trust weight",
            "weight x window length",
            &[Trace {
                label: "trust",
                values: &trust,
                color: GREEN,
            }],
            &[],
        )
        .internal()?;
        written.push(path);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
