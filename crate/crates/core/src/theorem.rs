//! Numerical checks of the closed forms for raw-patch attention logits on
//! periodic signals, plus the standard-versus-skimming reconstruction
//! comparison on a two-tone series.
//!
//! The logit between two patches `dt` apart is the integral of
//! `f(t) f(t + dt)` over one common period. For sums of harmonics the cross
//! terms vanish and only `(p/2) * amp^2 * cos(w dt)` per harmonic survives.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::data::IntervalScheme;
use crate::diff::Tensor;
use crate::model::{ModelError, SornModel};
use crate::train::{train_values, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TheoremError {
    #[error("invalid signal: {0}")]
    Signal(String),
    #[error("quadrature step {step} exceeds period / 1e4 ({limit})")]
    Step { step: f64, limit: f64 },
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

/// `c1 cos(w1 t) + c2 sin(w2 t)` with `w = 2 pi k / lcm(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoToneSignal {
    pub c1: f64,
    pub c2: f64,
    pub a: u64,
    pub b: u64,
}

impl TwoToneSignal {
    /// Amplitudes must be non-negative and finite, frequencies distinct and
    /// positive.
    pub fn new(c1: f64, c2: f64, a: u64, b: u64) -> Result<Self, TheoremError> {
        if a == 0 || b == 0 || a == b {
            return Err(TheoremError::Signal(format!("need distinct positive a, b, got {a}, {b}")));
        }
        if !(c1 >= 0.0 && c2 >= 0.0) || !c1.is_finite() || !c2.is_finite() {
            return Err(TheoremError::Signal("amplitudes must be finite and non-negative".into()));
        }
        Ok(Self { c1, c2, a, b })
    }

    pub fn period(&self) -> f64 {
        lcm(self.a, self.b) as f64
    }

    pub fn omega1(&self) -> f64 {
        TAU * self.a as f64 / self.period()
    }

    pub fn omega2(&self) -> f64 {
        TAU * self.b as f64 / self.period()
    }

    /// Period of the first tone.
    pub fn period1(&self) -> f64 {
        self.period() / self.a as f64
    }

    pub fn period2(&self) -> f64 {
        self.period() / self.b as f64
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.c1 * (self.omega1() * t).cos() + self.c2 * (self.omega2() * t).sin()
    }

    /// Exchanges the (amplitude, frequency) pairs of the two tones, so the
    /// louder tone moves to the sine slot.
    pub fn swapped(&self) -> Self {
        Self {
            c1: self.c2,
            c2: self.c1,
            a: self.b,
            b: self.a,
        }
    }
}

/// `(p/2) (c1^2 cos(w1 dt) + c2^2 cos(w2 dt))`.
pub fn closed_form_weight(signal: &TwoToneSignal, lag: f64) -> f64 {
    signal.period() / 2.0
        * (signal.c1 * signal.c1 * (signal.omega1() * lag).cos()
            + signal.c2 * signal.c2 * (signal.omega2() * lag).cos())
}

/// Composite Simpson rule of `f` on `[lo, hi]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (hi - lo) / n as f64;
    let mut sum = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + i as f64 * h);
    }
    sum * h / 3.0
}

fn intervals(period: f64, step: f64) -> Result<usize, TheoremError> {
    let limit = period / 1e4;
    if !(step > 0.0) || step > limit * (1.0 + 1e-12) {
        return Err(TheoremError::Step { step, limit });
    }
    Ok((period / step).round() as usize)
}

/// Simpson quadrature of `f(t) f(t + lag)` over `[start, start + p]`.
pub fn quadrature_weight(
    signal: &TwoToneSignal,
    start: f64,
    lag: f64,
    step: f64,
) -> Result<f64, TheoremError> {
    let p = signal.period();
    let n = intervals(p, step)?;
    Ok(simpson(|t| signal.eval(t) * signal.eval(t + lag), start, start + p, n))
}

/// Quadrature of `f(t) f(t + k h)` over `[start, start + p]` for each lag
/// index `k`, where `h = p / n`. `f` is sampled once on `[start, start + 2p]`.
pub fn lag_profile(
    f: impl Fn(f64) -> f64,
    start: f64,
    period: f64,
    n: usize,
    lag_steps: &[usize],
) -> Vec<f64> {
    let n = n + n % 2;
    let h = period / n as f64;
    let samples: Vec<f64> = (0..=2 * n).map(|i| f(start + i as f64 * h)).collect();
    lag_steps
        .iter()
        .map(|&k| {
            let k = k.min(n);
            let mut sum = samples[0] * samples[k] + samples[n] * samples[n + k];
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                sum += w * samples[i] * samples[i + k];
            }
            sum * h / 3.0
        })
        .collect()
}

/// `a0/2 + sum_n a_n cos(w_n t) + b_n sin(w_n t)` with `w_n = 2 pi n / p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierSignal {
    pub a0: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub period: f64,
}

impl FourierSignal {
    pub fn new(a0: f64, a: Vec<f64>, b: Vec<f64>, period: f64) -> Result<Self, TheoremError> {
        if a.len() != b.len() {
            return Err(TheoremError::Signal("a and b need the same length".into()));
        }
        if !(period > 0.0) || a.iter().chain(&b).chain([&a0]).any(|v| !v.is_finite()) {
            return Err(TheoremError::Signal("coefficients must be finite and period positive".into()));
        }
        Ok(Self { a0, a, b, period })
    }

    pub fn omega(&self, n: usize) -> f64 {
        TAU * n as f64 / self.period
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.a0 / 2.0
            + self
                .a
                .iter()
                .zip(&self.b)
                .enumerate()
                .map(|(i, (a, b))| {
                    let w = self.omega(i + 1) * t;
                    a * w.cos() + b * w.sin()
                })
                .sum::<f64>()
    }
}

/// `a0^2 p / 4 + (p/2) sum (a_n^2 + b_n^2) cos(w_n dt)`.
pub fn closed_form_general(signal: &FourierSignal, lag: f64) -> f64 {
    let p = signal.period;
    signal.a0 * signal.a0 * p / 4.0
        + p / 2.0
            * signal
                .a
                .iter()
                .zip(&signal.b)
                .enumerate()
                .map(|(i, (a, b))| (a * a + b * b) * (signal.omega(i + 1) * lag).cos())
                .sum::<f64>()
}

/// Simpson quadrature of `f(t) f(t + lag)` over one period.
pub fn quadrature_general(
    signal: &FourierSignal,
    start: f64,
    lag: f64,
    step: f64,
) -> Result<f64, TheoremError> {
    let p = signal.period;
    let n = intervals(p, step)?;
    Ok(simpson(|t| signal.eval(t) * signal.eval(t + lag), start, start + p, n))
}

/// Where the logit curve peaks inside one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub signal: TwoToneSignal,
    /// Period of the louder tone.
    pub dominant_period: f64,
    pub other_period: f64,
    /// Interior local maxima sharing the highest value.
    pub maximizers: Vec<f64>,
    pub max_weight: f64,
    /// Largest distance from a maximizer to a multiple of the louder period.
    pub offset: f64,
    /// Every maximizer sits on a multiple of the louder period, up to the
    /// scan resolution.
    pub exact: bool,
    /// Every maximizer is nearer to a multiple of the louder period than to
    /// any multiple of the quieter period that is not also one of the louder.
    pub nearest_dominant: bool,
}

impl DominanceReport {
    /// False when the louder period spans the whole interval, so no interior
    /// multiple exists to check.
    pub fn applicable(&self) -> bool {
        self.dominant_period < self.signal.period()
    }

    pub fn holds(&self) -> bool {
        !self.applicable() || (!self.maximizers.is_empty() && self.nearest_dominant)
    }
}

fn distance_to_multiple(x: f64, of: f64) -> f64 {
    let r = x / of;
    (r - r.round()).abs() * of
}

fn is_multiple(x: f64, of: f64, tol: f64) -> bool {
    distance_to_multiple(x, of) <= tol
}

/// Scans `dt` over `(0, p)` on a grid that hits every multiple of both
/// periods and reports the highest interior local maxima of the closed form.
pub fn dominance_report(signal: &TwoToneSignal) -> Result<DominanceReport, TheoremError> {
    if signal.c1 == signal.c2 {
        return Err(TheoremError::Signal("amplitudes must differ".into()));
    }
    let p = signal.period();
    let n = (200 * signal.a * signal.b) as usize;
    let h = p / n as f64;
    let values: Vec<f64> = (0..=n).map(|i| closed_form_weight(signal, i as f64 * h)).collect();
    let peaks: Vec<usize> = (1..n)
        .filter(|&i| values[i] >= values[i - 1] && values[i] >= values[i + 1])
        .collect();
    let max_weight = peaks.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * max_weight.abs().max(1.0);
    let maximizers: Vec<f64> = peaks
        .into_iter()
        .filter(|&i| values[i] >= max_weight - tol)
        .map(|i| i as f64 * h)
        .collect();
    let (loud, quiet) = if signal.c1 > signal.c2 {
        (signal.period1(), signal.period2())
    } else {
        (signal.period2(), signal.period1())
    };
    let offset = maximizers
        .iter()
        .map(|&m| distance_to_multiple(m, loud))
        .fold(0.0, f64::max);
    let nearest_dominant = maximizers.iter().all(|&m| {
        let to_loud = distance_to_multiple(m, loud);
        // quiet-only multiples near m
        let k = (m / quiet).round() as i64;
        (k - 1..=k + 1)
            .map(|j| j as f64 * quiet)
            .filter(|&q| !is_multiple(q, loud, h * 0.5))
            .all(|q| to_loud < (m - q).abs())
    });
    Ok(DominanceReport {
        signal: *signal,
        dominant_period: loud,
        other_period: quiet,
        maximizers,
        max_weight: if max_weight.is_finite() { max_weight } else { f64::NAN },
        offset,
        exact: offset <= h * 0.5,
        nearest_dominant,
    })
}

/// Worst error over a batch of quadrature-versus-closed-form comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub signals: usize,
    pub comparisons: usize,
    pub worst_error: f64,
    /// Human-readable description of the worst case.
    pub worst_case: String,
}

impl GridReport {
    fn new() -> Self {
        Self {
            signals: 0,
            comparisons: 0,
            worst_error: 0.0,
            worst_case: String::new(),
        }
    }

    fn record(&mut self, error: f64, case: impl FnOnce() -> String) {
        self.comparisons += 1;
        if !(error <= self.worst_error) {
            self.worst_error = error;
            self.worst_case = case();
        }
    }
}

/// Every `(a, b)` in `1..=4` with `a != b`, `c1` in `{1, 2, 3}` and `c2` in
/// `{0.5, 1}` below `c1`, at `points` lags `k p / points`. Errors are divided
/// by `c1^2 + c2^2`. Quadrature uses `steps` Simpson intervals per period.
pub fn verify_two_tone_grid(points: usize, steps: usize) -> GridReport {
    let mut report = GridReport::new();
    let stride = steps / points.max(1);
    let exact_grid = stride * points == steps;
    for a in 1..=4u64 {
        for b in 1..=4u64 {
            if a == b {
                continue;
            }
            for c1 in [1.0, 2.0, 3.0] {
                for c2 in [0.5, 1.0] {
                    if c2 >= c1 {
                        continue;
                    }
                    let s = TwoToneSignal::new(c1, c2, a, b).expect("valid grid signal");
                    let p = s.period();
                    let scale = c1 * c1 + c2 * c2;
                    report.signals += 1;
                    if exact_grid {
                        let lags: Vec<usize> = (0..points).map(|k| k * stride).collect();
                        let profile = lag_profile(|t| s.eval(t), 0.0, p, steps, &lags);
                        for (k, q) in profile.into_iter().enumerate() {
                            let lag = k as f64 * p / points as f64;
                            let err = (q - closed_form_weight(&s, lag)).abs() / scale;
                            report.record(err, || format!("c1={c1} c2={c2} a={a} b={b} lag={lag}"));
                        }
                    } else {
                        for k in 0..points {
                            let lag = k as f64 * p / points as f64;
                            let q = simpson(|t| s.eval(t) * s.eval(t + lag), 0.0, p, steps);
                            let err = (q - closed_form_weight(&s, lag)).abs() / scale;
                            report.record(err, || format!("c1={c1} c2={c2} a={a} b={b} lag={lag}"));
                        }
                    }
                }
            }
        }
    }
    report
}

/// `count` random signals with `harmonics` terms and coefficients in
/// `[-1, 1]`, each compared at `points` lags `k p / points`. Errors are
/// relative to the zero-lag value (the signal's energy over one period).
pub fn verify_fourier_random(
    count: usize,
    harmonics: usize,
    points: usize,
    period: f64,
    steps: usize,
    seed: u64,
) -> GridReport {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = GridReport::new();
    let stride = steps / points.max(1);
    let exact_grid = stride * points == steps;
    for i in 0..count {
        let a0 = rng.random_range(-1.0..=1.0);
        let a: Vec<f64> = (0..harmonics).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let b: Vec<f64> = (0..harmonics).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let f = FourierSignal::new(a0, a, b, period).expect("finite coefficients");
        let energy = closed_form_general(&f, 0.0);
        report.signals += 1;
        let quad: Vec<f64> = if exact_grid {
            let lags: Vec<usize> = (0..points).map(|k| k * stride).collect();
            lag_profile(|t| f.eval(t), 0.0, period, steps, &lags)
        } else {
            (0..points)
                .map(|k| {
                    let lag = k as f64 * period / points as f64;
                    simpson(|t| f.eval(t) * f.eval(t + lag), 0.0, period, steps)
                })
                .collect()
        };
        for (k, q) in quad.into_iter().enumerate() {
            let lag = k as f64 * period / points as f64;
            let err = (q - closed_form_general(&f, lag)).abs() / energy;
            report.record(err, || format!("signal {i} lag={lag}"));
        }
    }
    report
}

/// Dominance reports for the two-tone grid with distinct amplitudes, and for
/// each signal with its tones swapped.
pub fn dominance_grid() -> Vec<DominanceReport> {
    let mut out = Vec::new();
    for a in 1..=4u64 {
        for b in 1..=4u64 {
            if a == b {
                continue;
            }
            for c1 in [1.0, 2.0, 3.0] {
                for c2 in [0.5, 1.0] {
                    if c2 >= c1 {
                        continue;
                    }
                    let s = TwoToneSignal::new(c1, c2, a, b).expect("valid grid signal");
                    for signal in [s, s.swapped()] {
                        out.push(dominance_report(&signal).expect("distinct amplitudes"));
                    }
                }
            }
        }
    }
    out
}

/// Solves the normal equations of a small least-squares fit.
pub fn least_squares(basis: &[Vec<f64>], target: &[f64]) -> Option<Vec<f64>> {
    let k = basis.len();
    let mut m = vec![vec![0.0; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            m[i][j] = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
        }
        m[i][k] = basis[i].iter().zip(target).map(|(a, b)| a * b).sum();
    }
    for col in 0..k {
        let pivot = (col..k).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..k {
            if row != col {
                let factor = m[row][col] / m[col][col];
                for c in col..=k {
                    m[row][c] -= factor * m[col][c];
                }
            }
        }
    }
    Some((0..k).map(|i| m[i][k] / m[i][i]).collect())
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn rmse(x: &[f64], y: &[f64]) -> f64 {
    (x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64).sqrt()
}

/// A sum of two cosines with known parts, sampled at integer slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoToneSeries {
    pub high_amplitude: f64,
    pub high_period: f64,
    pub low_amplitude: f64,
    pub low_period: f64,
    pub length: usize,
}

impl TwoToneSeries {
    pub fn high(&self) -> Vec<f64> {
        (0..self.length)
            .map(|t| self.high_amplitude * (TAU * t as f64 / self.high_period).cos())
            .collect()
    }

    pub fn low(&self) -> Vec<f64> {
        (0..self.length)
            .map(|t| self.low_amplitude * (TAU * t as f64 / self.low_period).cos())
            .collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.high().iter().zip(self.low()).map(|(a, b)| a + b).collect()
    }

    /// Fits `[1, cos, sin]` of both periods and returns the fitted parts
    /// `(high, low)`.
    pub fn decompose(&self, recon: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let col = |f: &dyn Fn(f64) -> f64| (0..self.length).map(|t| f(t as f64)).collect::<Vec<_>>();
        let wh = TAU / self.high_period;
        let wl = TAU / self.low_period;
        let basis = vec![
            col(&|_| 1.0),
            col(&|t| (wh * t).cos()),
            col(&|t| (wh * t).sin()),
            col(&|t| (wl * t).cos()),
            col(&|t| (wl * t).sin()),
        ];
        let c = least_squares(&basis, recon)?;
        let part = |i: usize, j: usize| -> Vec<f64> {
            (0..self.length).map(|t| c[i] * basis[i][t] + c[j] * basis[j][t]).collect()
        };
        Some((part(1, 2), part(3, 4)))
    }
}

/// Outcome of the standard-versus-skimming comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// RMSE of the fitted quiet-tone part against the true quiet tone.
    pub skimming_low_rmse: f64,
    pub standard_low_rmse: f64,
    pub skimming_high_rmse: f64,
    pub standard_high_rmse: f64,
    /// Pearson correlation of the first skimming layer's output with each tone.
    pub first_layer_corr_high: f64,
    pub first_layer_corr_low: f64,
    /// Fitted amplitudes of each tone in the first layer's output.
    pub first_layer_high_amplitude: f64,
    pub first_layer_low_amplitude: f64,
    pub skimming_widths: Vec<f64>,
    pub standard_widths: Vec<f64>,
}

impl Comparison {
    pub fn low_ratio(&self) -> f64 {
        self.skimming_low_rmse / self.standard_low_rmse
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CompareError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("least-squares fit failed")]
    Fit,
}

fn amplitude(part: &[f64]) -> f64 {
    (2.0 * part.iter().map(|v| v * v).sum::<f64>() / part.len() as f64).sqrt()
}

/// Trains a skimming stack (`skimming`) and a single standard-attention layer
/// (the same config with the gate off and one layer) on the series and
/// compares how well each reconstructs the quiet tone.
pub fn compare_standard_vs_skimming(
    series: &TwoToneSeries,
    skimming: &TrainConfig,
) -> Result<Comparison, CompareError> {
    let values = series.values();
    let x = Tensor::column(values);
    let scheme = IntervalScheme::new(vec![0.0, 1.0], false).expect("valid edges");
    let missing = vec![false; series.length];

    let skim_cfg = TrainConfig {
        disable_ot: true,
        disable_skimming: false,
        ..skimming.clone()
    };
    let std_cfg = TrainConfig {
        disable_skimming: true,
        skimming_layers: 1,
        ..skim_cfg.clone()
    };

    let mut skim = SornModel::new(scheme.clone(), skim_cfg)?;
    train_values(&mut skim, &x, &missing)?;
    let mut standard = SornModel::new(scheme, std_cfg)?;
    train_values(&mut standard, &x, &missing)?;

    let skim_rec = skim.reconstruct(&x)?;
    let std_rec = standard.reconstruct(&x)?;
    let high = series.high();
    let low = series.low();

    let (sk_high, sk_low) = series.decompose(skim_rec.recon.data()).ok_or(CompareError::Fit)?;
    let (st_high, st_low) = series.decompose(std_rec.recon.data()).ok_or(CompareError::Fit)?;
    let first = skim_rec.layers[0].data();
    let (f_high, f_low) = series.decompose(first).ok_or(CompareError::Fit)?;

    Ok(Comparison {
        skimming_low_rmse: rmse(&sk_low, &low),
        standard_low_rmse: rmse(&st_low, &low),
        skimming_high_rmse: rmse(&sk_high, &high),
        standard_high_rmse: rmse(&st_high, &high),
        first_layer_corr_high: pearson(first, &high),
        first_layer_corr_low: pearson(first, &low),
        first_layer_high_amplitude: amplitude(&f_high),
        first_layer_low_amplitude: amplitude(&f_low),
        skimming_widths: skim.gate_widths().to_vec(),
        standard_widths: standard.gate_widths().to_vec(),
    })
}
