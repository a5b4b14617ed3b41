//! Learned transport of reconstructed mass between duration bins.
//!
//! Mass moved toward slower bins costs the midpoint gap; mass moved toward
//! faster bins is free, so the operator can absorb harmless fluctuations
//! without hiding slowdowns.

use crate::diff::{DiffError, Graph, NodeId, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TransportError {
    #[error("midpoints must be strictly increasing")]
    Midpoints,
    #[error("expected a {expected}x{expected} plan, got {got:?}")]
    Shape { expected: usize, got: Vec<usize> },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// `C[i,j] = M[i] - M[j]` below the diagonal, zero elsewhere.
pub fn cost_matrix(midpoints: &[f64]) -> Result<Tensor, TransportError> {
    if midpoints.windows(2).any(|w| !(w[0] < w[1])) || midpoints.is_empty() {
        return Err(TransportError::Midpoints);
    }
    let d = midpoints.len();
    Ok(Tensor::from_fn(d, d, |i, j| {
        if i > j {
            midpoints[i] - midpoints[j]
        } else {
            0.0
        }
    }))
}

/// Column-softmax of the plan logits. Every column sums to one.
pub fn normalized_plan(logits: &Tensor) -> Result<Tensor, TransportError> {
    let mut graph = Graph::new();
    let p = graph.constant(logits.clone());
    let soft = graph.col_softmax(p)?;
    Ok(graph.value(soft).clone())
}

/// Logits `scale * I`.
pub fn identity_logits(dims: usize, scale: f64) -> Tensor {
    Tensor::identity(dims).map(|v| v * scale)
}

/// Applies a normalized plan to every row: `out[t] = plan * x[t]`.
pub fn apply_transport(plan: &Tensor, x: &Tensor) -> Result<Tensor, TransportError> {
    let d = x.cols();
    if plan.shape() != [d, d] {
        return Err(TransportError::Shape {
            expected: d,
            got: plan.shape().to_vec(),
        });
    }
    Ok(x.matmul(&plan.transpose())?)
}

/// `sum_{i,j} plan[i,j] * row[j] * cost[i,j]`.
pub fn transport_cost(plan: &Tensor, row: &[f64], cost: &Tensor) -> f64 {
    let d = row.len();
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            total += plan.get(i, j) * row[j] * cost.get(i, j);
        }
    }
    total
}

/// Recorded transport of a `T x D` reconstruction.
#[derive(Debug, Clone, Copy)]
pub struct TransportNodes {
    pub plan: NodeId,
    /// The adjusted reconstruction, `T x D`.
    pub output: NodeId,
    /// Per-slot cost, `T x 1`.
    pub cost: NodeId,
}

/// Records the normalized plan; shared by every window of a batch.
pub fn plan_node(graph: &mut Graph, logits: NodeId) -> Result<NodeId, DiffError> {
    graph.col_softmax(logits)
}

/// Per-bin cost weights `colsum(plan * C)` as a `D x 1` node.
pub fn cost_weights_node(graph: &mut Graph, plan: NodeId, cost: NodeId) -> Result<NodeId, DiffError> {
    let d = graph.value(plan).rows();
    let weighted = graph.mul(plan, cost)?;
    let wt = graph.transpose(weighted)?;
    let ones = graph.constant(Tensor::full(&[d, 1], 1.0));
    graph.matmul(wt, ones)
}

/// Records the transport of `recon` given a plan node and its cost weights.
pub fn transport_nodes(
    graph: &mut Graph,
    recon: NodeId,
    plan: NodeId,
    cost_weights: NodeId,
) -> Result<TransportNodes, DiffError> {
    let pt = graph.transpose(plan)?;
    let output = graph.matmul(recon, pt)?;
    let cost = graph.matmul(recon, cost_weights)?;
    Ok(TransportNodes { plan, output, cost })
}
