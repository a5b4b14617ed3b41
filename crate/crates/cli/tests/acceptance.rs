//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sorn_core::attention::{gate, stack_forward, GateMode};
use sorn_core::data::{normalize, split, DistributionSeries, IntervalScheme, LabelSeries};
use sorn_core::diff::{finite_difference_check, Graph, Tensor};
use sorn_core::model::{gate_width_id, SornModel, TRANSPORT_LOGITS, TRUST_WIDTH};
use sorn_core::picky::trust_weights;
use sorn_core::score::{anomaly_score, best_f1, evaluate, predict, resolve_threshold, ThresholdPolicy};
use sorn_core::synth::{generate, Segment, SynthSpec};
use sorn_core::theorem::{compare_standard_vs_skimming, verify_fourier_random, verify_two_tone_grid, TwoToneSeries};
use sorn_core::train::{train, TrainConfig};
use sorn_core::transport::{cost_matrix, normalized_plan};

type Check = Result<String, String>;

struct Suite {
    failed: Vec<u32>,
}

impl Suite {
    fn run(&mut self, id: u32, name: &str, check: impl FnOnce() -> Check) {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1}s]");
                self.failed.push(id);
            }
        }
    }
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: u64, detail: String) -> Check {
    ensure(
        elapsed <= Duration::from_secs(limit_secs),
        format!("{detail}, {:.1}s of {limit_secs}s budget", elapsed.as_secs_f64()),
    )
}

fn theorem_one() -> Check {
    let start = Instant::now();
    let r = verify_two_tone_grid(100, 100_000);
    let elapsed = start.elapsed();
    let detail = format!(
        "{} signals x 100 lags, worst scaled error {:.2e} (bound 1e-6)",
        r.signals, r.worst_error
    );
    if r.signals != 60 || r.worst_error > 1e-6 {
        return Err(format!("{detail}; worst at {}", r.worst_case));
    }
    within(elapsed, 30, detail)
}

fn theorem_two() -> Check {
    let r = verify_fourier_random(20, 5, 50, 2.0, 100_000, 11);
    ensure(
        r.signals == 20 && r.comparisons == 1000 && r.worst_error <= 1e-6,
        format!("{} signals x 50 lags, worst relative error {:.2e} (bound 1e-6)", r.signals, r.worst_error),
    )
}

fn random_distributions(rows: usize, dims: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::from_fn(rows, dims, |_, _| rng.random_range(0.05..1.0));
    for i in 0..rows {
        let sum: f64 = t.row(i).iter().sum();
        t.row_mut(i).iter_mut().for_each(|v| *v /= sum);
    }
    t
}

fn gradient_integrity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scheme = IntervalScheme::new(vec![0.0, 10.0, 20.0, 30.0, 40.0], true).map_err(|e| e.to_string())?;
    let dims = scheme.dims();
    if dims != 5 {
        return Err(format!("scheme has {dims} bins"));
    }
    let config = TrainConfig {
        window_length: 50,
        skimming_layers: 2,
        patch_size: 3,
        ..TrainConfig::default()
    };
    let mut model = SornModel::new(scheme, config).map_err(|e| e.to_string())?;
    model.set_gate_widths(vec![4.3, 7.9]).map_err(|e| e.to_string())?;
    model.set_trust_width(5.5);
    let logits = Tensor::from_fn(dims, dims, |i, j| {
        rng.random_range(-1.0..1.0) + if i == j { 3.0 } else { 0.0 }
    });
    model.set_transport_logits(logits).map_err(|e| e.to_string())?;
    let batch: Vec<Tensor> = (0..3).map(|_| random_distributions(50, dims, &mut rng)).collect();

    let mut store = model.param_store();
    let ids = [gate_width_id(0), gate_width_id(1), TRUST_WIDTH.to_string(), TRANSPORT_LOGITS.to_string()];
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let checks = finite_difference_check(
        |graph: &mut Graph, store| {
            model
                .batch_loss(graph, store, &batch)
                .map(|n| n.loss)
                .map_err(|e| match e {
                    sorn_core::model::ModelError::Diff(d) => d,
                    other => panic!("{other}"),
                })
        },
        &mut store,
        &id_refs,
        1e-6,
    )
    .map_err(|e| e.to_string())?;
    let entries: usize = checks.iter().map(|c| c.entries.len()).sum();
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("four parameters");
    ensure(
        entries == 2 + 1 + dims * dims && worst.max_rel_error <= 1e-4,
        format!(
            "{entries} entries checked, worst relative error {:.2e} on {} (bound 1e-4)",
            worst.max_rel_error, worst.id
        ),
    )
}

fn structural_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_col = 0.0f64;
    for k in 0..100 {
        let d = 2 + k % 17;
        let logits = Tensor::from_fn(d, d, |i, j| match (k + i + 2 * j) % 7 {
            0 => 50.0,
            1 => -50.0,
            _ => rng.random_range(-50.0..50.0),
        });
        let plan = normalized_plan(&logits).map_err(|e| e.to_string())?;
        for s in plan.column_sums() {
            worst_col = worst_col.max((s - 1.0).abs());
        }
    }
    let cost = cost_matrix(IntervalScheme::sync().midpoints()).map_err(|e| e.to_string())?;
    let d = cost.rows();
    let cost_upper_zero = (0..d).all(|i| (i..d).all(|j| cost.get(i, j) == 0.0));
    let g = gate(40, 3.7);
    let gate_diag_zero = (0..40).all(|i| g.get(i, i) == 0.0);

    let x = random_distributions(40, 6, &mut rng);
    let stack = stack_forward(&x, 3, &[2.5, 6.0], GateMode::Skimming).map_err(|e| e.to_string())?;
    let mut worst_row = 0.0f64;
    for layer in &stack.layers {
        for w in &layer.weights {
            for s in w.row_sums() {
                worst_row = worst_row.max((s - 1.0).abs());
            }
        }
    }
    let trust = trust_weights(&stack.layers[0].logits, 4.0).map_err(|e| e.to_string())?;
    let trust_err = (trust.iter().sum::<f64>() - 1.0).abs();
    ensure(
        worst_col <= 1e-9 && cost_upper_zero && gate_diag_zero && worst_row <= 1e-9 && trust_err <= 1e-9,
        format!(
            "plan column sums off by {worst_col:.1e}, cost upper zero {cost_upper_zero}, gate diagonal zero {gate_diag_zero}, attention row sums off by {worst_row:.1e}, trust sum off by {trust_err:.1e}"
        ),
    )
}

fn skimming_ordering() -> Check {
    let series = TwoToneSeries {
        high_amplitude: 5.0,
        high_period: 48.0,
        low_amplitude: 1.0,
        low_period: 12.0,
        length: 2000,
    };
    let config = TrainConfig {
        skimming_layers: 2,
        patch_size: 6,
        window_length: 40,
        seed: 7,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let c = compare_standard_vs_skimming(&series, &config).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let detail = format!(
        "first layer corr high {:.3} vs low {:.3}; low-tone RMSE skimming {:.3} vs standard {:.3} (ratio {:.3}, bound 0.5)",
        c.first_layer_corr_high,
        c.first_layer_corr_low,
        c.skimming_low_rmse,
        c.standard_low_rmse,
        c.low_ratio()
    );
    if !(c.first_layer_corr_high > c.first_layer_corr_low && c.low_ratio() <= 0.5) {
        return Err(detail);
    }
    within(elapsed, 300, detail)
}

fn picky_robustness() -> Check {
    let starts = [100, 350, 600, 850, 1100, 1350];
    let spec = SynthSpec {
        length: 1500,
        seed: 21,
        segments: starts
            .iter()
            .map(|&start| Segment {
                start,
                length: 5,
                slow_ratio: 0.2,
                avg_slowdown: 120.0,
            })
            .collect(),
        ..SynthSpec::default()
    };
    let ds = generate(&spec).map_err(|e| e.to_string())?;
    let series = normalize(&ds.series);
    let config = TrainConfig {
        seed: 21,
        ..TrainConfig::default()
    };
    let mut model = SornModel::new(spec.scheme.clone(), config).map_err(|e| e.to_string())?;
    train(&mut model, &series).map_err(|e| e.to_string())?;
    let x = Tensor::new(vec![series.len(), series.dims()], series.values().to_vec()).map_err(|e| e.to_string())?;
    let trust = model.slot_trust(&x).map_err(|e| e.to_string())?;
    let labels = &ds.labels.labels;
    let mean = |anomalous: bool| {
        let v: Vec<f64> = trust
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == anomalous)
            .map(|(t, _)| *t)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let (bad, good) = (mean(true), mean(false));
    ensure(
        ds.labels.positives() > 0 && bad < good,
        format!(
            "{} anomalous slots ({:.1}%), mean trust anomalous {bad:.4} vs normal {good:.4}",
            ds.labels.positives(),
            100.0 * ds.labels.ratio()
        ),
    )
}

struct Detection {
    best: f64,
    quantile: f64,
    train_secs: f64,
}

fn detect(
    scheme: &IntervalScheme,
    train_part: &DistributionSeries,
    test_part: &DistributionSeries,
    labels: &LabelSeries,
    config: TrainConfig,
) -> Result<Detection, String> {
    let start = Instant::now();
    let mut model = SornModel::new(scheme.clone(), config).map_err(|e| e.to_string())?;
    train(&mut model, train_part).map_err(|e| e.to_string())?;
    let train_secs = start.elapsed().as_secs_f64();
    let train_scores = model.score(train_part).map_err(|e| e.to_string())?;
    let scores = model.score(test_part).map_err(|e| e.to_string())?;
    let best = best_f1(&scores, &labels.labels, false)
        .map_err(|e| e.to_string())?
        .map_or(0.0, |(_, m)| m.f1);
    let q = resolve_threshold(ThresholdPolicy::Quantile(0.99), Some(&train_scores), &scores, None, false)
        .map_err(|e| e.to_string())?;
    let quantile = evaluate(&predict(&scores, q.value), &labels.labels, false)
        .map_err(|e| e.to_string())?
        .f1;
    Ok(Detection {
        best,
        quantile,
        train_secs,
    })
}

struct DetectionData {
    scheme: IntervalScheme,
    train: DistributionSeries,
    test: DistributionSeries,
    test_labels: LabelSeries,
}

fn detection_data() -> Result<DetectionData, String> {
    let spec = SynthSpec::default();
    let ds = generate(&spec).map_err(|e| e.to_string())?;
    let series = normalize(&ds.series);
    let ((train, _), (test, test_labels)) = split(&series, &ds.labels, 0.7).map_err(|e| e.to_string())?;
    Ok(DetectionData {
        scheme: spec.scheme,
        train,
        test,
        test_labels,
    })
}

fn end_to_end(data: &DetectionData, full: &mut Option<Detection>) -> Check {
    let config = TrainConfig {
        skimming_layers: 2,
        patch_size: 2,
        ..TrainConfig::default()
    };
    let d = detect(&data.scheme, &data.train, &data.test, &data.test_labels, config)?;
    let detail = format!(
        "best_f1 F1 {:.3} (bar 0.90), quantile(0.99) F1 {:.3} (bar 0.85), {} test anomalies, training {:.1}s of 600s",
        d.best,
        d.quantile,
        data.test_labels.positives(),
        d.train_secs
    );
    let ok = d.best >= 0.90 && d.quantile >= 0.85 && d.train_secs <= 600.0;
    *full = Some(d);
    ensure(ok, detail)
}

fn ablation_ordering(data: &DetectionData, full: Option<&Detection>) -> Check {
    let full = full.ok_or("full model did not train")?;
    let base = TrainConfig {
        skimming_layers: 2,
        patch_size: 2,
        ..TrainConfig::default()
    };
    let variants = [
        ("no skimming", TrainConfig { disable_skimming: true, ..base.clone() }),
        ("no transport", TrainConfig { disable_ot: true, ..base.clone() }),
        ("no picky", TrainConfig { disable_picky: true, ..base.clone() }),
    ];
    let mut parts = vec![format!("full {:.3}", full.best)];
    let mut ok = true;
    for (name, config) in variants {
        let d = detect(&data.scheme, &data.train, &data.test, &data.test_labels, config)?;
        ok &= full.best >= d.best - 0.02;
        parts.push(format!("{name} {:.3}", d.best));
    }
    ensure(ok, format!("best_f1 F1: {} (slack 0.02)", parts.join(", ")))
}

fn score_identity() -> Check {
    let scheme = IntervalScheme::sync();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_distributions(30, scheme.dims(), &mut rng);
    let zeros = anomaly_score(&x, &x, scheme.midpoints()).map_err(|e| e.to_string())?;
    let all_zero = zeros.iter().all(|&s| s == 0.0);
    let observed = Tensor::from_rows(&[vec![0.0, 1.0]]).map_err(|e| e.to_string())?;
    let recon = Tensor::from_rows(&[vec![1.0, 0.0]]).map_err(|e| e.to_string())?;
    let single = anomaly_score(&observed, &recon, &[5.0, 35.0]).map_err(|e| e.to_string())?;
    ensure(
        all_zero && single == vec![30.0],
        format!("identical reconstruction all zero {all_zero}, single mass score {:?} (expected 30)", single),
    )
}

fn sorn(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sorn"))
        .args(args)
        .current_dir(dir)
        .env_remove("SORN_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("sorn {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
        sorn(&["generate", "--out", "data", "--seed", "13", "--tasks-per-slot", "200"], &root)?;
        sorn(
            &["train", "--series", "data/series.csv", "--out", "model", "--seed", "13", "--epochs", "4"],
            &root,
        )?;
        sorn(
            &[
                "score",
                "--model",
                "model/model.json",
                "--series",
                "data/series.csv",
                "--out",
                "scores.csv",
            ],
            &root,
        )?;
        outputs.push(std::fs::read(root.join("scores.csv")).map_err(|e| e.to_string())?);
    }
    ensure(
        !outputs[0].is_empty() && outputs[0] == outputs[1],
        format!("two seeded runs wrote {} and {} byte score files, identical {}", outputs[0].len(), outputs[1].len(), outputs[0] == outputs[1]),
    )
}

fn main() {
    // `cargo test -- --list` and similar probes expect a quick exit
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut suite = Suite { failed: Vec::new() };
    suite.run(1, "two-tone closed form", theorem_one);
    suite.run(2, "general closed form", theorem_two);
    suite.run(3, "gradient integrity", gradient_integrity);
    suite.run(4, "structural invariants", structural_invariants);
    suite.run(5, "skimming ordering", skimming_ordering);
    suite.run(6, "picky robustness", picky_robustness);
    match detection_data() {
        Ok(data) => {
            let mut full = None;
            suite.run(7, "end-to-end detection", || end_to_end(&data, &mut full));
            suite.run(8, "ablation ordering", || ablation_ordering(&data, full.as_ref()));
        }
        Err(e) => {
            suite.run(7, "end-to-end detection", || Err(e.clone()));
            suite.run(8, "ablation ordering", || Err(e));
        }
    }
    suite.run(9, "anomaly score identity", score_identity);
    suite.run(10, "cli determinism", determinism);
    if suite.failed.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: failed criteria {:?}", suite.failed);
        std::process::exit(1);
    }
}
