//! Gated skimming attention.
//!
//! Each layer attends, per bin, from every slot to every other slot of the
//! window using the raw `p`-slot history before each slot as both query and
//! key. A Gaussian-complement gate zeroes the logit between a slot and
//! itself and damps nearby slots, so a slot is rebuilt from distant, periodic
//! context. Stacked layers subtract what the previous layer explained.

use std::rc::Rc;

use crate::diff::{DiffError, Graph, NodeId, Tensor};

/// Whether layers gate their logits or run as plain attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Skimming,
    /// Gate fixed to all ones.
    Standard,
}

/// Window `t` holds slots `t-p ..= t`, left-padded by repeating slot 0.
/// Returns a `T x (p+1) x D` tensor.
pub fn extend_windows(x: &Tensor, patch: usize) -> Result<Tensor, DiffError> {
    if patch == 0 {
        return Err(DiffError::EmptyAxis("extend_windows"));
    }
    let (t_len, d) = x.dims2();
    let mut data = Vec::with_capacity(t_len * (patch + 1) * d);
    for t in 0..t_len {
        for k in 0..=patch {
            let src = (t + k).saturating_sub(patch);
            data.extend_from_slice(x.row(src));
        }
    }
    Tensor::new(vec![t_len, patch + 1, d], data)
}

/// `G[i,j] = 1 - exp(-(i-j)^2 / width^2)`.
pub fn gate(n: usize, width: f64) -> Tensor {
    Tensor::from_fn(n, n, |i, j| {
        let diff = i as f64 - j as f64;
        1.0 - (-(diff * diff) / (width * width)).exp()
    })
}

fn squared_distances(n: usize) -> Tensor {
    Tensor::from_fn(n, n, |i, j| {
        let diff = i as f64 - j as f64;
        diff * diff
    })
}

/// Records the gate for width node `width` on `graph`.
pub fn gate_node(graph: &mut Graph, n: usize, width: NodeId) -> Result<NodeId, DiffError> {
    let dist = graph.constant(squared_distances(n));
    let w2 = graph.square(width);
    let scaled = graph.div_scalar(dist, w2)?;
    let neg = graph.neg(scaled);
    let decay = graph.exp(neg);
    let ones = graph.constant(Tensor::full(&[n, n], 1.0));
    graph.sub(ones, decay)
}

/// Flat indices selecting the `p` slots before each slot in column `d`.
fn query_index(t_len: usize, dims: usize, patch: usize, d: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(t_len * patch);
    for t in 0..t_len {
        for k in 0..patch {
            idx.push((t + k).saturating_sub(patch) * dims + d);
        }
    }
    idx.into()
}

fn column_index(t_len: usize, dims: usize, d: usize) -> Rc<[usize]> {
    (0..t_len).map(|t| t * dims + d).collect()
}

/// Nodes recorded by one layer.
#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub output: NodeId,
    /// Raw logits `q k^T`, one `T x T` node per bin.
    pub logits: Vec<NodeId>,
    /// Row-softmaxed gated logits, one per bin.
    pub weights: Vec<NodeId>,
}

/// Records one layer on `x` (`T x D`). `gate` is a `T x T` node.
pub fn layer_nodes(
    graph: &mut Graph,
    x: NodeId,
    patch: usize,
    gate: NodeId,
) -> Result<LayerNodes, DiffError> {
    if patch == 0 {
        return Err(DiffError::EmptyAxis("layer_forward"));
    }
    let (t_len, dims) = graph.value(x).dims2();
    let mut outputs = Vec::with_capacity(dims);
    let mut logits = Vec::with_capacity(dims);
    let mut weights = Vec::with_capacity(dims);
    for d in 0..dims {
        let q = graph.gather(x, query_index(t_len, dims, patch, d), vec![t_len, patch])?;
        let v = graph.gather(x, column_index(t_len, dims, d), vec![t_len, 1])?;
        let qt = graph.transpose(q)?;
        let a = graph.matmul(q, qt)?;
        let gated = graph.mul(a, gate)?;
        let soft = graph.row_softmax(gated)?;
        outputs.push(graph.matmul(soft, v)?);
        logits.push(a);
        weights.push(soft);
    }
    let output = graph.concat_cols(&outputs)?;
    Ok(LayerNodes {
        output,
        logits,
        weights,
    })
}

/// Nodes recorded by a full stack.
#[derive(Debug, Clone)]
pub struct StackNodes {
    /// Sum of all layer outputs.
    pub output: NodeId,
    pub layers: Vec<LayerNodes>,
    /// Input minus every layer's output.
    pub residual: NodeId,
}

impl StackNodes {
    /// The first layer's raw logits, one per bin.
    pub fn first_logits(&self) -> &[NodeId] {
        &self.layers[0].logits
    }
}

/// Records `widths.len()` layers. Each entry of `widths` is a one-element
/// gate-width node; in [`GateMode::Standard`] the widths are ignored.
pub fn stack_nodes(
    graph: &mut Graph,
    x: NodeId,
    patch: usize,
    widths: &[NodeId],
    mode: GateMode,
) -> Result<StackNodes, DiffError> {
    let t_len = graph.value(x).rows();
    let gates = gate_nodes(graph, t_len, widths, mode)?;
    stack_with_gates(graph, x, patch, &gates)
}

/// One `T x T` gate node per layer.
pub fn gate_nodes(
    graph: &mut Graph,
    t_len: usize,
    widths: &[NodeId],
    mode: GateMode,
) -> Result<Vec<NodeId>, DiffError> {
    match mode {
        GateMode::Standard => {
            let ones = graph.constant(Tensor::full(&[t_len, t_len], 1.0));
            Ok(vec![ones; widths.len()])
        }
        GateMode::Skimming => widths.iter().map(|&w| gate_node(graph, t_len, w)).collect(),
    }
}

/// Records a stack whose per-layer gates are already on the graph.
pub fn stack_with_gates(
    graph: &mut Graph,
    x: NodeId,
    patch: usize,
    gates: &[NodeId],
) -> Result<StackNodes, DiffError> {
    if gates.is_empty() {
        return Err(DiffError::EmptyAxis("stack_forward"));
    }
    let mut current = x;
    let mut total: Option<NodeId> = None;
    let mut layers = Vec::with_capacity(gates.len());
    for &g in gates {
        let layer = layer_nodes(graph, current, patch, g)?;
        current = graph.sub(current, layer.output)?;
        total = Some(match total {
            None => layer.output,
            Some(acc) => graph.add(acc, layer.output)?,
        });
        layers.push(layer);
    }
    Ok(StackNodes {
        output: total.expect("at least one layer"),
        layers,
        residual: current,
    })
}

/// Plain values of one layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub output: Tensor,
    pub logits: Vec<Tensor>,
    pub weights: Vec<Tensor>,
}

/// Plain values of a stack.
#[derive(Debug, Clone)]
pub struct StackOutput {
    pub output: Tensor,
    pub layers: Vec<LayerOutput>,
    pub residual: Tensor,
}

/// One layer on plain values.
pub fn layer_forward(x: &Tensor, patch: usize, width: f64, mode: GateMode) -> Result<LayerOutput, DiffError> {
    let out = stack_forward(x, patch, &[width], mode)?;
    Ok(out.layers.into_iter().next().expect("one layer"))
}

/// A stack on plain values, one layer per entry of `widths`.
pub fn stack_forward(
    x: &Tensor,
    patch: usize,
    widths: &[f64],
    mode: GateMode,
) -> Result<StackOutput, DiffError> {
    let (t_len, dims) = x.dims2();
    let mut graph = Graph::new();
    let input = graph.constant(x.clone().reshape(vec![t_len, dims])?);
    let width_nodes: Vec<NodeId> = widths.iter().map(|&w| graph.constant(Tensor::scalar(w))).collect();
    let nodes = stack_nodes(&mut graph, input, patch, &width_nodes, mode)?;
    let layers = nodes
        .layers
        .iter()
        .map(|l| LayerOutput {
            output: graph.value(l.output).clone(),
            logits: l.logits.iter().map(|&n| graph.value(n).clone()).collect(),
            weights: l.weights.iter().map(|&n| graph.value(n).clone()).collect(),
        })
        .collect();
    Ok(StackOutput {
        output: graph.value(nodes.output).clone(),
        layers,
        residual: graph.value(nodes.residual).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(t_len: usize, dims: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(t_len, dims, f)
    }

    #[test]
    fn windows_pad_with_first_slot() {
        let x = series(5, 2, |t, d| (10 * t + d) as f64);
        let w = extend_windows(&x, 2).unwrap();
        assert_eq!(w.shape(), &[5, 3, 2]);
        assert_eq!(&w.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let last = &w.data()[4 * 6..5 * 6];
        assert_eq!(&last[4..], x.row(4));
        assert_eq!(&last[..2], x.row(2));
        assert!(extend_windows(&x, 0).is_err());
    }

    #[test]
    fn gate_diagonal_is_exactly_zero() {
        let g = gate(7, 2.5);
        for i in 0..7 {
            assert_eq!(g.get(i, i), 0.0);
            for j in 0..7 {
                assert_eq!(g.get(i, j), g.get(j, i));
                assert!((0.0..1.0).contains(&g.get(i, j)));
            }
        }
        assert_eq!(gate(5, -2.5), gate(5, 2.5));
    }

    #[test]
    fn gate_node_matches_plain_gate() {
        let mut graph = Graph::new();
        let w = graph.constant(Tensor::scalar(3.0));
        let g = gate_node(&mut graph, 6, w).unwrap();
        let plain = gate(6, 3.0);
        for (a, b) in graph.value(g).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_series_is_a_fixed_point() {
        let x = series(12, 3, |_, d| 0.25 + d as f64);
        let out = layer_forward(&x, 3, 6.0, GateMode::Skimming).unwrap();
        for (a, b) in out.output.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_slot_copies_value() {
        let x = series(1, 2, |_, d| 3.0 + d as f64);
        let out = layer_forward(&x, 2, 4.0, GateMode::Skimming).unwrap();
        assert_eq!(out.weights[0].data(), &[1.0]);
        assert_eq!(out.output, x);
    }

    #[test]
    fn one_layer_stack_equals_layer() {
        let x = series(10, 2, |t, d| ((t * 7 + d * 3) % 5) as f64 * 0.1);
        let stack = stack_forward(&x, 2, &[4.0], GateMode::Skimming).unwrap();
        let layer = layer_forward(&x, 2, 4.0, GateMode::Skimming).unwrap();
        assert_eq!(stack.output, layer.output);
    }

    #[test]
    fn pure_tone_logits_peak_at_period_multiples() {
        let period = 8;
        let x = series(64, 1, |t, _| (2.0 * std::f64::consts::PI * t as f64 / period as f64).cos());
        let out = layer_forward(&x, 2 * period, 10.0, GateMode::Skimming).unwrap();
        let a = &out.logits[0];
        let i = 40;
        let best = (0..64)
            .filter(|&j| j != i && j >= 2 * period)
            .max_by(|&j, &k| a.get(i, j).total_cmp(&a.get(i, k)))
            .unwrap();
        assert_eq!((i as i64 - best as i64).rem_euclid(period as i64), 0);
    }

    proptest! {
        #[test]
        fn stack_shape_and_telescoping(
            t_len in 1usize..14,
            dims in 1usize..4,
            patch in 1usize..4,
            layers in 1usize..4,
            seed in 0u64..1000,
        ) {
            let x = series(t_len, dims, |t, d| {
                let v = (seed as usize * 31 + t * 17 + d * 7) % 13;
                v as f64 / 13.0
            });
            let widths: Vec<f64> = (0..layers).map(|l| 2.0 + l as f64).collect();
            let out = stack_forward(&x, patch, &widths, GateMode::Skimming).unwrap();
            prop_assert_eq!(out.output.shape(), x.shape());
            for k in 0..x.len() {
                let recon = out.output.data()[k] + out.residual.data()[k];
                prop_assert!((recon - x.data()[k]).abs() < 1e-9);
            }
            for layer in &out.layers {
                for w in &layer.weights {
                    for s in w.row_sums() {
                        prop_assert!((s - 1.0).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn self_logit_gated_to_zero(width in 0.5f64..20.0, n in 1usize..30) {
            let g = gate(n, width);
            for i in 0..n {
                prop_assert_eq!(g.get(i, i) * 1e300, 0.0);
            }
        }
    }
}
