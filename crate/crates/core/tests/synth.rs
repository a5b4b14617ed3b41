use sorn_core::synth::{autocorrelation, generate, max_amplitude, Segment, SynthSpec, Tone};

fn single_tone(seed: u64) -> SynthSpec {
    SynthSpec {
        tones: vec![Tone {
            amplitude: 40.0,
            period: 288.0,
        }],
        segments: Vec::new(),
        length: 2000,
        tasks_per_slot: 200,
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn default_anomaly_ratio_is_about_one_percent() {
    let ds = generate(&SynthSpec::default()).unwrap();
    let ratio = ds.labels.ratio();
    assert!((ratio - 0.01).abs() <= 0.005, "{ratio}");
}

#[test]
fn sample_means_track_the_mean_curve() {
    let spec = single_tone(3);
    let ds = generate(&spec).unwrap();
    let n = spec.tasks_per_slot as f64;
    let inside = ds
        .sample_means
        .iter()
        .zip(&ds.mean)
        .filter(|(s, m)| {
            let se = *m / spec.gamma_shape.sqrt() / n.sqrt();
            (*s - *m).abs() <= 3.0 * se
        })
        .count();
    assert!(inside as f64 >= 0.99 * spec.length as f64, "{inside}");
}

#[test]
fn no_tones_means_no_periodicity() {
    let spec = SynthSpec {
        tones: Vec::new(),
        ..single_tone(4)
    };
    let ds = generate(&spec).unwrap();
    // sampling noise alone: |r| ~ 1/sqrt(T)
    for lag in [1, 48, 288] {
        let r = autocorrelation(&ds.sample_means, lag);
        assert!(r.abs() < 0.1, "lag {lag}: {r}");
    }
}

#[test]
fn noise_has_the_requested_spread() {
    let spec = SynthSpec {
        noise: 0.5,
        ..single_tone(5)
    };
    let ds = generate(&spec).unwrap();
    let scale = max_amplitude(&ds.clean_mean, spec.base_duration);
    let diffs: Vec<f64> = ds.mean.iter().zip(&ds.clean_mean).map(|(a, b)| a - b).collect();
    let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let std = (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
    let target = 0.5 * scale;
    assert!((std - target).abs() <= 0.1 * target, "{std} vs {target}");
}

#[test]
fn distortion_weakens_periodicity() {
    let strict = generate(&single_tone(6)).unwrap();
    let stretched = generate(&SynthSpec {
        distortion: 0.5,
        ..single_tone(6)
    })
    .unwrap();
    let r0 = autocorrelation(&strict.sample_means, 288);
    let r5 = autocorrelation(&stretched.sample_means, 288);
    assert!(r0 >= 0.95, "{r0}");
    assert!(r5 < r0, "{r5} vs {r0}");
}

#[test]
fn labels_follow_the_distribution_not_the_segments() {
    // a tiny slowdown may leave segment slots unlabelled
    let spec = SynthSpec {
        segments: vec![Segment {
            start: 100,
            length: 5,
            slow_ratio: 0.02,
            avg_slowdown: 30.0,
        }],
        ..single_tone(7)
    };
    let ds = generate(&spec).unwrap();
    assert_eq!(ds.injected.iter().filter(|&&i| i).count(), 5);
    assert!(ds.labels.positives() < 5);
}
