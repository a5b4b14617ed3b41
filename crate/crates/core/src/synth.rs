//! Synthetic compound-periodic task-duration datasets with labelled slowdowns.
//!
//! Each slot's mean duration is a sum of cosine tones around a base level.
//! Task durations are drawn from a gamma distribution around that mean and
//! binned. Slowdowns add exponential delays to a fraction of a slot's tasks,
//! and a slot is labelled when some decile of its durations moves by more
//! than the tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DistributionSeries, IntervalScheme, LabelSeries};
use crate::score::quantile;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("anomaly segments {0} and {1} overlap")]
    Overlap(usize, usize),
    #[error("mean duration {value} at slot {slot} is not positive")]
    NonPositiveMean { slot: usize, value: f64 },
}

/// One cosine component of the mean duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    /// Minutes.
    pub amplitude: f64,
    /// Slots.
    pub period: f64,
}

/// A run of slots where some tasks are slowed down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub start: usize,
    pub length: usize,
    /// Fraction of each slot's tasks that are delayed.
    pub slow_ratio: f64,
    /// Mean added delay, minutes.
    pub avg_slowdown: f64,
}

fn default_shape() -> f64 {
    4.0
}

fn default_floor() -> f64 {
    1.0
}

/// Full description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub tones: Vec<Tone>,
    /// Minutes.
    pub base_duration: f64,
    pub tasks_per_slot: usize,
    /// Number of slots.
    pub length: usize,
    /// Minutes per slot.
    pub slot_duration: f64,
    pub scheme: IntervalScheme,
    /// Noise standard deviation as a fraction of the clean curve's largest
    /// deviation from the base level.
    pub noise: f64,
    /// Each cycle of each tone is stretched by a factor drawn from `(1, 1 + R]`.
    pub distortion: f64,
    pub segments: Vec<Segment>,
    /// Minutes a decile must move for a slot to count as slowed.
    pub tolerance: f64,
    pub seed: u64,
    #[serde(default = "default_shape")]
    pub gamma_shape: f64,
    /// Lower bound applied to the noisy mean before sampling, minutes.
    #[serde(default = "default_floor")]
    pub mean_floor: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let segments = [350, 850, 1350, 2200, 2500, 2800]
            .into_iter()
            .map(|start| Segment {
                start,
                length: 5,
                slow_ratio: 0.2,
                avg_slowdown: 120.0,
            })
            .collect();
        Self {
            tones: vec![
                Tone { amplitude: 40.0, period: 288.0 },
                Tone { amplitude: 10.0, period: 48.0 },
            ],
            base_duration: 60.0,
            tasks_per_slot: 500,
            length: 3000,
            slot_duration: 5.0,
            scheme: IntervalScheme::sync(),
            noise: 0.0,
            distortion: 0.0,
            segments,
            tolerance: 10.0,
            seed: 0,
            gamma_shape: default_shape(),
            mean_floor: default_floor(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.length == 0 || self.tasks_per_slot == 0 {
            return bad("length and tasks_per_slot must be positive".into());
        }
        if !(self.slot_duration > 0.0) {
            return bad("slot_duration must be positive".into());
        }
        for tone in &self.tones {
            if !(tone.amplitude >= 0.0) || !(tone.period > 0.0) {
                return bad(format!("tone {tone:?} needs amplitude >= 0 and period > 0"));
            }
        }
        let total: f64 = self.tones.iter().map(|t| t.amplitude).sum();
        if !(self.base_duration > total) {
            return bad(format!(
                "base_duration {} must exceed the summed amplitudes {total}",
                self.base_duration
            ));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(self.distortion >= 0.0) {
            return bad(format!("distortion must be non-negative, got {}", self.distortion));
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive".into());
        }
        if !(self.gamma_shape > 0.0) || !(self.mean_floor > 0.0) {
            return bad("gamma_shape and mean_floor must be positive".into());
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.length == 0 || s.start + s.length > self.length {
                return bad(format!("segment {i} must lie within [0, {})", self.length));
            }
            if !(0.0..=1.0).contains(&s.slow_ratio) {
                return bad(format!("segment {i} slow_ratio must lie in [0, 1]"));
            }
            if !(s.avg_slowdown > 0.0) {
                return bad(format!("segment {i} avg_slowdown must be positive"));
            }
        }
        let mut order: Vec<usize> = (0..self.segments.len()).collect();
        order.sort_by_key(|&i| self.segments[i].start);
        for w in order.windows(2) {
            let (a, b) = (&self.segments[w[0]], &self.segments[w[1]]);
            if a.start + a.length > b.start {
                return Err(SynthError::Overlap(w[0], w[1]));
            }
        }
        Ok(())
    }
}

const STREAM_DISTORT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_TASKS: u64 = 3;
const STREAM_SLOW: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Per-tone cycle stretches and the resulting phase of every slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    /// `stretches[i][k]` scales cycle `k` of tone `i`.
    pub stretches: Vec<Vec<f64>>,
    /// `phases[i][t]` counts completed cycles of tone `i` at slot `t`.
    pub phases: Vec<Vec<f64>>,
}

/// Stretches every cycle of every tone by an independent factor on
/// `(1, 1 + R]`. `R = 0` keeps strict periodicity.
pub fn distort_periods(spec: &SynthSpec, distortion: f64) -> Result<Timeline, SynthError> {
    if !(distortion >= 0.0) {
        return Err(SynthError::Spec(format!("distortion must be non-negative, got {distortion}")));
    }
    let mut rng = stream(spec.seed, STREAM_DISTORT);
    let t_len = spec.length;
    let mut stretches = Vec::with_capacity(spec.tones.len());
    let mut phases = Vec::with_capacity(spec.tones.len());
    for tone in &spec.tones {
        let mut factors = Vec::new();
        let mut phase = Vec::with_capacity(t_len);
        if distortion == 0.0 {
            phase.extend((0..t_len).map(|t| t as f64 / tone.period));
        } else {
            let mut cycle_start = 0.0;
            let mut cycle = 0usize;
            let draw = |rng: &mut ChaCha8Rng| {
                let u: f64 = rng.random();
                1.0 + distortion * (1.0 - u)
            };
            factors.push(draw(&mut rng));
            for t in 0..t_len {
                let t = t as f64;
                while t >= cycle_start + tone.period * factors[cycle] {
                    cycle_start += tone.period * factors[cycle];
                    cycle += 1;
                    factors.push(draw(&mut rng));
                }
                phase.push(cycle as f64 + (t - cycle_start) / (tone.period * factors[cycle]));
            }
        }
        stretches.push(factors);
        phases.push(phase);
    }
    Ok(Timeline { stretches, phases })
}

/// `base + sum_i amp_i cos(2 pi phase_i(t))`.
pub fn mean_curve(spec: &SynthSpec, timeline: &Timeline) -> Vec<f64> {
    (0..spec.length)
        .map(|t| {
            spec.base_duration
                + spec
                    .tones
                    .iter()
                    .zip(&timeline.phases)
                    .map(|(tone, ph)| tone.amplitude * (std::f64::consts::TAU * ph[t]).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Largest absolute deviation of the mean curve from the base level.
pub fn max_amplitude(mean: &[f64], base: f64) -> f64 {
    mean.iter().map(|m| (m - base).abs()).fold(0.0, f64::max)
}

/// Adds zero-mean Gaussian noise with standard deviation `noise * scale`.
/// Zero noise returns the input untouched.
pub fn inject_noise(mean: &[f64], noise: f64, scale: f64, seed: u64) -> Result<Vec<f64>, SynthError> {
    if !(noise >= 0.0) {
        return Err(SynthError::Spec(format!("noise must be non-negative, got {noise}")));
    }
    let std = noise * scale;
    if std == 0.0 {
        return Ok(mean.to_vec());
    }
    let normal = Normal::new(0.0, std).map_err(|e| SynthError::Spec(e.to_string()))?;
    let mut rng = stream(seed, STREAM_NOISE);
    Ok(mean.iter().map(|m| m + normal.sample(&mut rng)).collect())
}

/// A generated dataset with its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub series: DistributionSeries,
    pub labels: LabelSeries,
    /// Mean before noise.
    pub clean_mean: Vec<f64>,
    /// Mean the tasks were drawn around, after noise.
    pub mean: Vec<f64>,
    /// Sample mean of each slot's durations before slowdowns.
    pub sample_means: Vec<f64>,
    /// Slots inside an anomaly segment.
    pub injected: Vec<bool>,
    pub timeline: Timeline,
}

/// Deciles used by the labelling rule.
pub const DECILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Largest decile shift of `after` over `before`.
pub fn max_decile_shift(before: &[f64], after: &[f64]) -> f64 {
    DECILES
        .iter()
        .map(|&q| quantile(after, q).unwrap_or(0.0) - quantile(before, q).unwrap_or(0.0))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Runs the whole generator.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let timeline = distort_periods(spec, spec.distortion)?;
    let clean_mean = mean_curve(spec, &timeline);
    if let Some((slot, &value)) = clean_mean.iter().enumerate().find(|(_, m)| !(**m > 0.0)) {
        return Err(SynthError::NonPositiveMean { slot, value });
    }
    let scale = max_amplitude(&clean_mean, spec.base_duration);
    let mean = inject_noise(&clean_mean, spec.noise, scale, spec.seed)?;

    let t_len = spec.length;
    let n = spec.tasks_per_slot;
    let d = spec.scheme.dims();
    let mut segment_of = vec![None; t_len];
    for s in &spec.segments {
        for slot in segment_of.iter_mut().skip(s.start).take(s.length) {
            *slot = Some(*s);
        }
    }

    let mut task_rng = stream(spec.seed, STREAM_TASKS);
    let mut slow_rng = stream(spec.seed, STREAM_SLOW);
    let mut counts = vec![0u64; t_len * d];
    let mut labels = Vec::with_capacity(t_len);
    let mut sample_means = Vec::with_capacity(t_len);
    let mut before = vec![0.0; n];
    for t in 0..t_len {
        let mu = mean[t].max(spec.mean_floor);
        let gamma = Gamma::new(spec.gamma_shape, mu / spec.gamma_shape)
            .map_err(|e| SynthError::Spec(e.to_string()))?;
        for v in before.iter_mut() {
            *v = gamma.sample(&mut task_rng);
        }
        sample_means.push(before.iter().sum::<f64>() / n as f64);
        let mut after = before.clone();
        if let Some(seg) = segment_of[t] {
            let slowed = (seg.slow_ratio * n as f64).round() as usize;
            let exp = Exp::new(1.0 / seg.avg_slowdown).map_err(|e| SynthError::Spec(e.to_string()))?;
            for v in after.iter_mut().take(slowed) {
                *v += exp.sample(&mut slow_rng);
            }
        }
        labels.push(max_decile_shift(&before, &after) > spec.tolerance);
        for &v in &after {
            if let Some(b) = spec.scheme.bin_of(v) {
                counts[t * d + b] += 1;
            }
        }
    }

    let timestamps = (0..t_len).map(|t| t as f64 * spec.slot_duration).collect();
    let series = DistributionSeries::from_counts(timestamps, spec.slot_duration, d, counts)
        .map_err(|e| SynthError::Spec(e.to_string()))?;
    Ok(SynthDataset {
        series,
        labels: LabelSeries::new(labels),
        clean_mean,
        mean,
        sample_means,
        injected: segment_of.iter().map(Option::is_some).collect(),
        timeline,
    })
}

/// The dataset without noise or slowdowns.
pub fn gen_base(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    generate(&SynthSpec {
        noise: 0.0,
        segments: Vec::new(),
        ..spec.clone()
    })
}

/// Correlation between the series and itself shifted by `lag`, over the
/// overlapping part.
pub fn autocorrelation(values: &[f64], lag: usize) -> f64 {
    let n = values.len();
    if lag + 1 >= n {
        return 0.0;
    }
    let (a, b) = (&values[..n - lag], &values[lag..]);
    let m = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / m, b.iter().sum::<f64>() / m);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            length: 400,
            tasks_per_slot: 200,
            segments: vec![Segment { start: 100, length: 5, slow_ratio: 0.2, avg_slowdown: 120.0 }],
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
        assert_ne!(generate(&small(3)).unwrap().series, generate(&small(4)).unwrap().series);
    }

    #[test]
    fn zero_noise_and_distortion_are_no_ops() {
        let spec = small(1);
        let base = generate(&spec).unwrap();
        let mean = inject_noise(&base.clean_mean, 0.0, 40.0, 9).unwrap();
        assert_eq!(mean, base.clean_mean);
        assert_eq!(base.mean, base.clean_mean);
        let t = distort_periods(&spec, 0.0).unwrap();
        assert!(t.stretches.iter().all(Vec::is_empty));
        assert!(inject_noise(&mean, -0.1, 1.0, 0).is_err());
    }

    #[test]
    fn stretch_factors_stay_in_range() {
        let spec = small(2);
        let t = distort_periods(&spec, 0.5).unwrap();
        for f in t.stretches.iter().flatten() {
            assert!(*f > 1.0 && *f <= 1.5);
        }
        // phases never decrease
        for ph in &t.phases {
            assert!(ph.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn sync_dimension_is_fourteen() {
        let data = generate(&SynthSpec { length: 10, segments: vec![], ..SynthSpec::default() }).unwrap();
        assert_eq!(data.series.dims(), 14);
    }

    #[test]
    fn overlapping_segments_rejected() {
        let mut spec = small(0);
        spec.segments.push(Segment { start: 102, length: 5, slow_ratio: 0.1, avg_slowdown: 10.0 });
        assert_eq!(generate(&spec).unwrap_err(), SynthError::Overlap(0, 1));
    }

    #[test]
    fn spec_validation() {
        let spec = SynthSpec { base_duration: 50.0, ..SynthSpec::default() };
        assert!(spec.validate().is_err());
        let spec = SynthSpec { noise: -1.0, ..SynthSpec::default() };
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::default();
        spec.segments[0].start = 2998;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn no_slowdown_means_no_labels() {
        let mut spec = small(5);
        spec.segments[0].slow_ratio = 0.0;
        let data = generate(&spec).unwrap();
        assert_eq!(data.labels.positives(), 0);
        assert_eq!(data.injected.iter().filter(|&&i| i).count(), 5);
    }

    #[test]
    fn full_slowdown_labels_every_segment_slot() {
        let mut spec = small(6);
        spec.segments[0].slow_ratio = 1.0;
        let data = generate(&spec).unwrap();
        for t in 100..105 {
            assert!(data.labels.labels[t]);
        }
        assert_eq!(data.labels.positives(), 5);
    }

    #[test]
    fn decile_shift_of_identical_samples_is_zero() {
        let v = [3.0, 1.0, 2.0, 5.0];
        assert_eq!(max_decile_shift(&v, &v), 0.0);
    }

    #[test]
    fn autocorrelation_basics() {
        let tone: Vec<f64> = (0..480).map(|t| (std::f64::consts::TAU * t as f64 / 48.0).cos()).collect();
        assert!((autocorrelation(&tone, 48) - 1.0).abs() < 1e-12);
        assert!((autocorrelation(&tone, 24) + 1.0).abs() < 1e-12);
        assert_eq!(autocorrelation(&[1.0; 10], 2), 0.0);
    }
}
