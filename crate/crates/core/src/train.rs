//! Optimizer, training loop and checkpoints.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DistributionSeries, IntervalScheme};
use crate::diff::{DiffError, Graph, ParamStore, Tensor};
use crate::model::{ModelError, SornModel};
use crate::score::ThresholdPolicy;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("series must be normalized before training")]
    NotNormalized,
    #[error("series has {got} bins but the scheme has {expected}")]
    Dims { got: usize, expected: usize },
    #[error("no window of {window} slots is free of missing slots ({len} slots available)")]
    NoWindows { window: usize, len: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (window starts {starts:?})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        starts: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

fn default_early_stop_delta() -> f64 {
    1e-5
}

fn default_patience() -> usize {
    5
}

fn default_transport_init() -> f64 {
    5.0
}

/// Everything that shapes a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Slots per training window.
    pub window_length: usize,
    pub skimming_layers: usize,
    pub patch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    #[serde(default)]
    pub disable_skimming: bool,
    #[serde(default)]
    pub disable_ot: bool,
    #[serde(default)]
    pub disable_picky: bool,
    #[serde(default)]
    pub threshold_policy: ThresholdPolicy,
    /// Initial gate width of every layer and of the trust gate; `None`
    /// means twice the patch size.
    #[serde(default)]
    pub gate_width_init: Option<f64>,
    /// Diagonal of the initial transport logits.
    #[serde(default = "default_transport_init")]
    pub transport_init: f64,
    /// Stop when the loss improved by less than this over `patience` epochs.
    #[serde(default = "default_early_stop_delta")]
    pub early_stop_delta: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 100,
            epochs: 50,
            window_length: 20,
            skimming_layers: 2,
            patch_size: 2,
            lambda: 0.5,
            seed: 0,
            disable_skimming: false,
            disable_ot: false,
            disable_picky: false,
            threshold_policy: ThresholdPolicy::default(),
            gate_width_init: None,
            transport_init: default_transport_init(),
            early_stop_delta: default_early_stop_delta(),
            patience: default_patience(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.window_length == 0 || self.skimming_layers == 0 {
            return bad("batch_size, window_length and skimming_layers must be positive");
        }
        if self.patch_size == 0 {
            return bad("patch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if let Some(w) = self.gate_width_init {
            if !(w > 0.0) || !w.is_finite() {
                return bad("gate_width_init must be positive");
            }
        }
        if !self.transport_init.is_finite() {
            return bad("transport_init must be finite");
        }
        Ok(())
    }

    pub fn initial_gate_width(&self) -> f64 {
        self.gate_width_init.unwrap_or(2.0 * self.patch_size as f64)
    }

    /// Layers actually run: the standard-attention ablation has one.
    pub fn effective_layers(&self) -> usize {
        if self.disable_skimming {
            1
        } else {
            self.skimming_layers
        }
    }
}

/// Adaptive-moment optimizer with the usual defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.first.is_empty() {
            self.first = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((param, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = param.grad.data().to_vec();
            for (k, value) in param.value.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                *value -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Window start positions whose windows contain no missing slot.
pub fn valid_starts(missing: &[bool], window: usize) -> Vec<usize> {
    if missing.len() < window {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut run = 0usize;
    for (t, &m) in missing.iter().enumerate() {
        run = if m { 0 } else { run + 1 };
        if run >= window {
            out.push(t + 1 - window);
        }
    }
    out
}

/// Per-epoch progress.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    /// Root mean squared reconstruction error over the epoch's windows.
    pub rmse: Vec<f64>,
}

/// Trains `model` in place on a normalized series.
pub fn train(model: &mut SornModel, series: &DistributionSeries) -> Result<TrainHistory, TrainError> {
    let config = model.config().clone();
    config.validate()?;
    if !series.is_normalized() {
        return Err(TrainError::NotNormalized);
    }
    if series.dims() != model.scheme().dims() {
        return Err(TrainError::Dims {
            got: series.dims(),
            expected: model.scheme().dims(),
        });
    }
    let x = Tensor::new(vec![series.len(), series.dims()], series.values().to_vec())?;
    train_values(model, &x, series.missing())
}

/// Trains on an arbitrary real-valued `T x D` matrix. Windows touching a
/// slot flagged in `missing` are skipped.
pub fn train_values(model: &mut SornModel, x: &Tensor, missing: &[bool]) -> Result<TrainHistory, TrainError> {
    let config = model.config().clone();
    config.validate()?;
    if x.cols() != model.scheme().dims() {
        return Err(TrainError::Dims {
            got: x.cols(),
            expected: model.scheme().dims(),
        });
    }
    if missing.len() != x.rows() {
        return Err(TrainError::Config(format!(
            "{} missing flags for {} slots",
            missing.len(),
            x.rows()
        )));
    }
    let window = config.window_length;
    let mut starts = valid_starts(missing, window);
    if starts.is_empty() {
        return Err(TrainError::NoWindows {
            window,
            len: x.rows(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = model.param_store();
    let mut adam = Adam::new(config.learning_rate);
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        starts.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut sq_err = 0.0;
        let mut cells = 0usize;
        let mut batches = 0usize;
        for (batch, chunk) in starts.chunks(config.batch_size).enumerate() {
            let windows: Vec<Tensor> = chunk.iter().map(|&s| x.slice_rows(s, s + window)).collect();
            let mut graph = Graph::new();
            let out = model.batch_loss(&mut graph, &store, &windows)?;
            let loss = graph.value(out.loss).item()?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch,
                    starts: chunk.iter().take(8).copied().collect(),
                });
            }
            store.zero_grad();
            graph.backward(out.loss, &mut store)?;
            if store.iter().any(|p| !p.grad.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch,
                    starts: chunk.iter().take(8).copied().collect(),
                });
            }
            adam.step(&mut store);
            loss_sum += loss;
            batches += 1;
            for (w, node) in windows.iter().zip(&out.adjusted) {
                for (a, b) in graph.value(*node).data().iter().zip(w.data()) {
                    sq_err += (a - b) * (a - b);
                }
                cells += w.len();
            }
        }
        history.loss.push(loss_sum / batches as f64);
        history.rmse.push((sq_err / cells as f64).sqrt());
        let n = history.loss.len();
        if config.patience > 0 && n > config.patience {
            let improvement = history.loss[n - 1 - config.patience] - history.loss[n - 1];
            if improvement < config.early_stop_delta {
                break;
            }
        }
    }
    model.load_params(&store)?;
    model.set_loss_trace(history.loss.clone());
    Ok(history)
}

/// Current on-disk layout version.
pub const FORMAT_VERSION: u32 = 1;

/// Serialized model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub scheme: IntervalScheme,
    pub config: TrainConfig,
    pub sigma: Vec<f64>,
    pub sigma_hat: f64,
    #[serde(rename = "P_logits")]
    pub p_logits: Vec<Vec<f64>>,
    pub loss_trace: Vec<f64>,
    /// Column-softmax of `P_logits`, for inspection only.
    #[serde(default)]
    pub transport_plan: Vec<Vec<f64>>,
    /// Transport cost matrix, for inspection only.
    #[serde(default)]
    pub cost_matrix: Vec<Vec<f64>>,
    /// Scores of the training slots, used by the quantile threshold.
    #[serde(default)]
    pub train_scores: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
