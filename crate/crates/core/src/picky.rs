//! Slot trust weights and the weighted reconstruction loss.
//!
//! A slot that draws a lot of attention from far-away slots looks like the
//! rest of the periodic pattern and is trusted; a slot nobody attends to is
//! likely contaminated and is down-weighted.

use crate::attention::{gate, gate_node};
use crate::diff::{DiffError, Graph, NodeId, Tensor};
use crate::transport::transport_cost;

/// Records the trust weights of a window as a `1 x T` node.
///
/// `logits` holds one `T x T` raw logit node per bin; they are averaged,
/// multiplied by the `T x T` gate node `gate`, summed along rows and
/// softmaxed across slots.
pub fn trust_weight_nodes(
    graph: &mut Graph,
    logits: &[NodeId],
    gate: NodeId,
) -> Result<NodeId, DiffError> {
    let first = *logits.first().ok_or(DiffError::EmptyAxis("trust_weights"))?;
    let t_len = graph.value(first).rows();
    let mut total = first;
    for &l in &logits[1..] {
        total = graph.add(total, l)?;
    }
    let mean = graph.scale(total, 1.0 / logits.len() as f64);
    let g = gate;
    let gated = graph.mul(mean, g)?;
    let ones = graph.constant(Tensor::full(&[t_len, 1], 1.0));
    let sums = graph.matmul(gated, ones)?;
    let row = graph.transpose(sums)?;
    graph.row_softmax(row)
}

/// Uniform `1 x T` weights, used when trust weighting is switched off.
pub fn uniform_weight_node(graph: &mut Graph, t_len: usize) -> NodeId {
    graph.constant(Tensor::full(&[1, t_len], 1.0 / t_len as f64))
}

/// Records `sum_t w[t] * (|recon[t] - x[t]| + lambda * cost[t])`.
///
/// `weights` is `1 x T`; `cost`, when present, is `T x 1`.
pub fn picky_loss_node(
    graph: &mut Graph,
    recon: NodeId,
    x: NodeId,
    weights: NodeId,
    cost: Option<NodeId>,
    lambda: f64,
) -> Result<NodeId, DiffError> {
    let diff = graph.sub(recon, x)?;
    let norms = graph.row_norm(diff);
    let term = match cost {
        Some(c) if lambda != 0.0 => {
            let scaled = graph.scale(c, lambda);
            graph.add(norms, scaled)?
        }
        _ => norms,
    };
    let loss = graph.matmul(weights, term)?;
    Ok(loss)
}

/// Trust weights on plain values.
pub fn trust_weights(logits: &[Tensor], width: f64) -> Result<Vec<f64>, DiffError> {
    let mut graph = Graph::new();
    let nodes: Vec<NodeId> = logits.iter().map(|l| graph.constant(l.clone())).collect();
    let w = graph.constant(Tensor::scalar(width));
    let t_len = logits.first().map_or(0, Tensor::rows);
    let g = gate_node(&mut graph, t_len, w)?;
    let out = trust_weight_nodes(&mut graph, &nodes, g)?;
    Ok(graph.value(out).data().to_vec())
}

/// The unsoftmaxed trust scores `rowsum(mean(logits) * gate)`.
pub fn trust_scores(logits: &[Tensor], width: f64) -> Vec<f64> {
    let t_len = logits[0].rows();
    let g = gate(t_len, width);
    let scale = 1.0 / logits.len() as f64;
    (0..t_len)
        .map(|i| {
            (0..t_len)
                .map(|j| logits.iter().map(|l| l.get(i, j)).sum::<f64>() * scale * g.get(i, j))
                .sum()
        })
        .collect()
}

/// The loss on plain values. `plan` is the normalized plan applied to
/// `recon` to get `adjusted`; pass `lambda = 0` to drop the cost term.
#[allow(clippy::too_many_arguments)]
pub fn picky_loss(
    adjusted: &Tensor,
    x: &Tensor,
    weights: &[f64],
    plan: &Tensor,
    recon: &Tensor,
    cost: &Tensor,
    lambda: f64,
) -> f64 {
    (0..x.rows())
        .map(|t| {
            let err: f64 = adjusted
                .row(t)
                .iter()
                .zip(x.row(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let moved = if lambda == 0.0 {
                0.0
            } else {
                lambda * transport_cost(plan, recon.row(t), cost)
            };
            weights[t] * (err + moved)
        })
        .sum()
}
