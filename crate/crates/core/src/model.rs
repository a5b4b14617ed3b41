//! Trainable state and the forward pass over windows and whole series.

use crate::attention::{gate_node, gate_nodes, stack_with_gates, GateMode};
use crate::data::{DistributionSeries, IntervalScheme};
use crate::diff::{DiffError, Graph, NodeId, ParamStore, Tensor};
use crate::picky::{picky_loss_node, trust_weight_nodes, uniform_weight_node};
use crate::score::{anomaly_score, project_rows, ScoreError};
use crate::train::{ModelCheckpoint, TrainConfig, FORMAT_VERSION};
use crate::transport::{cost_matrix, cost_weights_node, identity_logits, normalized_plan, transport_nodes, TransportError};

pub const GATE_WIDTH: &str = "gate_width";
pub const TRUST_WIDTH: &str = "trust_width";
pub const TRANSPORT_LOGITS: &str = "transport_logits";

/// Parameter id of layer `l`'s gate width.
pub fn gate_width_id(l: usize) -> String {
    format!("{GATE_WIDTH}.{l}")
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("input has {got} bins but the model expects {expected}")]
    Dims { got: usize, expected: usize },
    #[error("checkpoint format {0} is not supported")]
    Format(u32),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// The full detector: attention stack, transport plan and trust gate.
#[derive(Debug, Clone, PartialEq)]
pub struct SornModel {
    scheme: IntervalScheme,
    config: TrainConfig,
    gate_widths: Vec<f64>,
    trust_width: f64,
    transport_logits: Tensor,
    cost: Tensor,
    loss_trace: Vec<f64>,
}

/// Nodes for one batch.
#[derive(Debug, Clone)]
pub struct BatchNodes {
    /// Mean loss over the batch's windows.
    pub loss: NodeId,
    /// Stack output per window.
    pub recon: Vec<NodeId>,
    /// Transported reconstruction per window.
    pub adjusted: Vec<NodeId>,
    /// `1 x T` trust weights per window.
    pub weights: Vec<NodeId>,
}

/// Plain outputs of one window.
#[derive(Debug, Clone)]
pub struct WindowOutput {
    pub recon: Tensor,
    pub adjusted: Tensor,
    pub layers: Vec<Tensor>,
    pub weights: Vec<f64>,
}

/// Series-level reconstruction; row `t` comes from the window centred on `t`.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub recon: Tensor,
    pub adjusted: Tensor,
    pub layers: Vec<Tensor>,
}

struct Shared {
    gates: Vec<NodeId>,
    trust_gate: Option<NodeId>,
    plan: Option<NodeId>,
    cost_weights: Option<NodeId>,
}

impl SornModel {
    pub fn new(scheme: IntervalScheme, config: TrainConfig) -> Result<Self, ModelError> {
        config
            .validate()
            .map_err(|e| ModelError::Invalid(e.to_string()))?;
        let d = scheme.dims();
        let width = config.initial_gate_width();
        let cost = cost_matrix(scheme.midpoints())?;
        Ok(Self {
            gate_widths: vec![width; config.effective_layers()],
            trust_width: width,
            transport_logits: identity_logits(d, config.transport_init),
            cost,
            scheme,
            config,
            loss_trace: Vec::new(),
        })
    }

    pub fn scheme(&self) -> &IntervalScheme {
        &self.scheme
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn gate_widths(&self) -> &[f64] {
        &self.gate_widths
    }

    pub fn trust_width(&self) -> f64 {
        self.trust_width
    }

    pub fn transport_logits(&self) -> &Tensor {
        &self.transport_logits
    }

    pub fn cost(&self) -> &Tensor {
        &self.cost
    }

    pub fn plan(&self) -> Result<Tensor, ModelError> {
        Ok(normalized_plan(&self.transport_logits)?)
    }

    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    pub fn set_loss_trace(&mut self, trace: Vec<f64>) {
        self.loss_trace = trace;
    }

    /// Overrides the gate widths, one per effective layer.
    pub fn set_gate_widths(&mut self, widths: Vec<f64>) -> Result<(), ModelError> {
        if widths.len() != self.gate_widths.len() {
            return Err(ModelError::Invalid(format!(
                "expected {} gate widths, got {}",
                self.gate_widths.len(),
                widths.len()
            )));
        }
        self.gate_widths = widths;
        Ok(())
    }

    pub fn set_transport_logits(&mut self, logits: Tensor) -> Result<(), ModelError> {
        let d = self.scheme.dims();
        if logits.shape() != [d, d] {
            return Err(ModelError::Dims {
                got: logits.cols(),
                expected: d,
            });
        }
        self.transport_logits = logits;
        Ok(())
    }

    pub fn set_trust_width(&mut self, width: f64) {
        self.trust_width = width;
    }

    fn mode(&self) -> GateMode {
        if self.config.disable_skimming {
            GateMode::Standard
        } else {
            GateMode::Skimming
        }
    }

    /// The trainable values as a parameter store.
    pub fn param_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (l, &w) in self.gate_widths.iter().enumerate() {
            store
                .insert(&gate_width_id(l), Tensor::scalar(w))
                .expect("ids are unique");
        }
        store
            .insert(TRUST_WIDTH, Tensor::scalar(self.trust_width))
            .expect("ids are unique");
        store
            .insert(TRANSPORT_LOGITS, self.transport_logits.clone())
            .expect("ids are unique");
        store
    }

    /// Copies trained values back from a store built by [`Self::param_store`].
    pub fn load_params(&mut self, store: &ParamStore) -> Result<(), ModelError> {
        let get = |id: &str| {
            store
                .get(id)
                .map(|p| p.value.clone())
                .ok_or_else(|| ModelError::Diff(DiffError::UnknownParameter(id.to_string())))
        };
        for l in 0..self.gate_widths.len() {
            self.gate_widths[l] = get(&gate_width_id(l))?.item()?;
        }
        self.trust_width = get(TRUST_WIDTH)?.item()?;
        self.set_transport_logits(get(TRANSPORT_LOGITS)?)?;
        Ok(())
    }

    fn shared(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        t_len: usize,
        with_trust: bool,
    ) -> Result<Shared, ModelError> {
        let widths: Vec<NodeId> = (0..self.gate_widths.len())
            .map(|l| graph.param(store, &gate_width_id(l)))
            .collect::<Result<_, _>>()?;
        let gates = gate_nodes(graph, t_len, &widths, self.mode())?;
        let trust_gate = if with_trust && !self.config.disable_picky {
            let w = graph.param(store, TRUST_WIDTH)?;
            Some(gate_node(graph, t_len, w)?)
        } else {
            None
        };
        let (plan, cost_weights) = if self.config.disable_ot {
            (None, None)
        } else {
            let logits = graph.param(store, TRANSPORT_LOGITS)?;
            let plan = graph.col_softmax(logits)?;
            let cost = graph.constant(self.cost.clone());
            let weights = cost_weights_node(graph, plan, cost)?;
            (Some(plan), Some(weights))
        };
        Ok(Shared {
            gates,
            trust_gate,
            plan,
            cost_weights,
        })
    }

    fn check_dims(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.cols() != self.scheme.dims() {
            return Err(ModelError::Dims {
                got: x.cols(),
                expected: self.scheme.dims(),
            });
        }
        Ok(())
    }

    /// Records the mean window loss of `windows`, which must share a length.
    pub fn batch_loss(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        windows: &[Tensor],
    ) -> Result<BatchNodes, ModelError> {
        let first = windows
            .first()
            .ok_or_else(|| ModelError::Invalid("empty batch".into()))?;
        let t_len = first.rows();
        if windows.iter().any(|w| w.rows() != t_len) {
            return Err(ModelError::Invalid("windows in a batch must share a length".into()));
        }
        let shared = self.shared(graph, store, t_len, true)?;
        let mut out = BatchNodes {
            loss: graph.constant(Tensor::scalar(0.0)),
            recon: Vec::with_capacity(windows.len()),
            adjusted: Vec::with_capacity(windows.len()),
            weights: Vec::with_capacity(windows.len()),
        };
        let mut total: Option<NodeId> = None;
        for w in windows {
            self.check_dims(w)?;
            let x = graph.constant(w.clone());
            let stack = stack_with_gates(graph, x, self.config.patch_size, &shared.gates)?;
            let (adjusted, cost) = match (shared.plan, shared.cost_weights) {
                (Some(plan), Some(cw)) => {
                    let t = transport_nodes(graph, stack.output, plan, cw)?;
                    (t.output, Some(t.cost))
                }
                _ => (stack.output, None),
            };
            let weights = match shared.trust_gate {
                Some(g) => trust_weight_nodes(graph, stack.first_logits(), g)?,
                None => uniform_weight_node(graph, t_len),
            };
            let loss = picky_loss_node(graph, adjusted, x, weights, cost, self.config.lambda)?;
            total = Some(match total {
                None => loss,
                Some(acc) => graph.add(acc, loss)?,
            });
            out.recon.push(stack.output);
            out.adjusted.push(adjusted);
            out.weights.push(weights);
        }
        out.loss = graph.scale(total.expect("non-empty"), 1.0 / windows.len() as f64);
        Ok(out)
    }

    /// Runs one window through the model.
    pub fn forward_window(&self, x: &Tensor) -> Result<WindowOutput, ModelError> {
        self.check_dims(x)?;
        let store = self.param_store();
        let mut graph = Graph::new();
        let t_len = x.rows();
        let shared = self.shared(&mut graph, &store, t_len, true)?;
        let input = graph.constant(x.clone());
        let stack = stack_with_gates(&mut graph, input, self.config.patch_size, &shared.gates)?;
        let adjusted = match (shared.plan, shared.cost_weights) {
            (Some(plan), Some(cw)) => transport_nodes(&mut graph, stack.output, plan, cw)?.output,
            _ => stack.output,
        };
        let weights = match shared.trust_gate {
            Some(g) => trust_weight_nodes(&mut graph, stack.first_logits(), g)?,
            None => uniform_weight_node(&mut graph, t_len),
        };
        Ok(WindowOutput {
            recon: graph.value(stack.output).clone(),
            adjusted: graph.value(adjusted).clone(),
            layers: stack.layers.iter().map(|l| graph.value(l.output).clone()).collect(),
            weights: graph.value(weights).data().to_vec(),
        })
    }

    fn window_len(&self, t_len: usize) -> usize {
        self.config.window_length.min(t_len)
    }

    /// Start of the window used for slot `t` of a series of `t_len` slots.
    pub fn window_start(&self, t: usize, t_len: usize) -> usize {
        let w = self.window_len(t_len);
        t.saturating_sub(w / 2).min(t_len - w)
    }

    /// Reconstructs every slot from the window centred on it.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Reconstruction, ModelError> {
        self.check_dims(x)?;
        let (t_len, d) = x.dims2();
        let layers_n = self.gate_widths.len();
        let mut recon = Tensor::zeros(&[t_len, d]);
        let mut adjusted = Tensor::zeros(&[t_len, d]);
        let mut layers = vec![Tensor::zeros(&[t_len, d]); layers_n];
        if t_len == 0 {
            return Ok(Reconstruction { recon, adjusted, layers });
        }
        let w = self.window_len(t_len);
        let store = self.param_store();
        let mut t = 0;
        while t < t_len {
            let start = self.window_start(t, t_len);
            let mut end = t;
            while end < t_len && self.window_start(end, t_len) == start {
                end += 1;
            }
            let window = x.slice_rows(start, start + w);
            let mut graph = Graph::new();
            let shared = self.shared(&mut graph, &store, w, false)?;
            let input = graph.constant(window);
            let stack = stack_with_gates(&mut graph, input, self.config.patch_size, &shared.gates)?;
            let adj = match (shared.plan, shared.cost_weights) {
                (Some(plan), Some(cw)) => transport_nodes(&mut graph, stack.output, plan, cw)?.output,
                _ => stack.output,
            };
            for slot in t..end {
                let k = slot - start;
                recon.row_mut(slot).copy_from_slice(graph.value(stack.output).row(k));
                adjusted.row_mut(slot).copy_from_slice(graph.value(adj).row(k));
                for (l, layer) in stack.layers.iter().enumerate() {
                    layers[l].row_mut(slot).copy_from_slice(graph.value(layer.output).row(k));
                }
            }
            t = end;
        }
        Ok(Reconstruction { recon, adjusted, layers })
    }

    /// Average trust weight of each slot over every window covering it,
    /// scaled by the window length so that uniform weights read as 1.
    pub fn slot_trust(&self, x: &Tensor) -> Result<Vec<f64>, ModelError> {
        self.check_dims(x)?;
        let t_len = x.rows();
        let w = self.window_len(t_len);
        let mut total = vec![0.0; t_len];
        let mut count = vec![0usize; t_len];
        for start in 0..=(t_len - w) {
            let out = self.forward_window(&x.slice_rows(start, start + w))?;
            for (k, v) in out.weights.iter().enumerate() {
                total[start + k] += v * w as f64;
                count[start + k] += 1;
            }
        }
        Ok(total.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
    }

    /// Anomaly scores of a normalized series.
    pub fn score(&self, series: &DistributionSeries) -> Result<Vec<f64>, ModelError> {
        let x = Tensor::new(vec![series.len(), series.dims()], series.values().to_vec())?;
        self.score_tensor(&x)
    }

    pub fn score_tensor(&self, x: &Tensor) -> Result<Vec<f64>, ModelError> {
        let rec = self.reconstruct(x)?;
        let projected = project_rows(&rec.adjusted);
        Ok(anomaly_score(x, &projected, self.scheme.midpoints())?)
    }

    pub fn to_checkpoint(&self, train_scores: Vec<f64>) -> Result<ModelCheckpoint, ModelError> {
        let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect();
        Ok(ModelCheckpoint {
            format_version: FORMAT_VERSION,
            scheme: self.scheme.clone(),
            config: self.config.clone(),
            sigma: self.gate_widths.clone(),
            sigma_hat: self.trust_width,
            p_logits: rows(&self.transport_logits),
            loss_trace: self.loss_trace.clone(),
            transport_plan: rows(&self.plan()?),
            cost_matrix: rows(&self.cost),
            train_scores,
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self, ModelError> {
        if ckpt.format_version != FORMAT_VERSION {
            return Err(ModelError::Format(ckpt.format_version));
        }
        let mut model = SornModel::new(ckpt.scheme.clone(), ckpt.config.clone())?;
        model.set_gate_widths(ckpt.sigma.clone())?;
        model.set_trust_width(ckpt.sigma_hat);
        let logits = Tensor::from_rows(&ckpt.p_logits)?;
        model.set_transport_logits(logits)?;
        model.set_loss_trace(ckpt.loss_trace.clone());
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_scheme() -> IntervalScheme {
        IntervalScheme::new(vec![0.0, 10.0, 20.0], true).unwrap()
    }

    fn toy_series(t_len: usize) -> Tensor {
        Tensor::from_fn(t_len, 3, |t, d| (t as f64 * 0.7 + d as f64).sin().abs() + 0.2)
    }

    fn normalized(x: Tensor) -> Tensor {
        project_rows(&x)
    }

    #[test]
    fn window_start_is_centred_and_clamped() {
        let cfg = TrainConfig { window_length: 6, ..TrainConfig::default() };
        let m = SornModel::new(toy_scheme(), cfg).unwrap();
        assert_eq!(m.window_start(0, 20), 0);
        assert_eq!(m.window_start(3, 20), 0);
        assert_eq!(m.window_start(4, 20), 1);
        assert_eq!(m.window_start(19, 20), 14);
        assert_eq!(m.window_start(2, 4), 0);
    }

    #[test]
    fn reconstruction_matches_window_forward() {
        let cfg = TrainConfig { window_length: 8, ..TrainConfig::default() };
        let m = SornModel::new(toy_scheme(), cfg).unwrap();
        let x = normalized(toy_series(20));
        let rec = m.reconstruct(&x).unwrap();
        let start = m.window_start(10, 20);
        let direct = m.forward_window(&x.slice_rows(start, start + 8)).unwrap();
        assert_eq!(rec.adjusted.row(10), direct.adjusted.row(10 - start));
        assert_eq!(rec.recon.row(10), direct.recon.row(10 - start));
    }

    #[test]
    fn ablations_change_the_parts_used() {
        let x = normalized(toy_series(8));
        let base = TrainConfig { window_length: 8, ..TrainConfig::default() };
        let no_ot = SornModel::new(toy_scheme(), TrainConfig { disable_ot: true, ..base.clone() }).unwrap();
        let out = no_ot.forward_window(&x).unwrap();
        assert_eq!(out.adjusted, out.recon);

        let no_picky = SornModel::new(toy_scheme(), TrainConfig { disable_picky: true, ..base.clone() }).unwrap();
        assert!(no_picky.forward_window(&x).unwrap().weights.iter().all(|&w| w == 1.0 / 8.0));

        let standard = SornModel::new(toy_scheme(), TrainConfig { disable_skimming: true, ..base }).unwrap();
        assert_eq!(standard.gate_widths().len(), 1);
        assert_eq!(standard.forward_window(&x).unwrap().layers.len(), 1);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let cfg = TrainConfig { window_length: 6, ..TrainConfig::default() };
        let mut m = SornModel::new(toy_scheme(), cfg).unwrap();
        m.set_gate_widths(vec![3.1, 4.0 / 3.0]).unwrap();
        m.set_trust_width(0.1 + 0.2);
        m.set_loss_trace(vec![1.0 / 7.0]);
        let ckpt = m.to_checkpoint(vec![0.5, -1e-17]).unwrap();
        let back = ModelCheckpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let reloaded = SornModel::from_checkpoint(&back).unwrap();
        assert_eq!(reloaded, m);
        let x = normalized(toy_series(15));
        assert_eq!(reloaded.score_tensor(&x).unwrap(), m.score_tensor(&x).unwrap());
    }

    #[test]
    fn wrong_dims_rejected() {
        let m = SornModel::new(toy_scheme(), TrainConfig::default()).unwrap();
        assert!(matches!(
            m.reconstruct(&Tensor::zeros(&[5, 4])),
            Err(ModelError::Dims { .. })
        ));
    }
}
