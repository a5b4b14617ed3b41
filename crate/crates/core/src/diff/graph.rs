//! The recording tape: every forward op appends a node, `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products.

use std::rc::Rc;

use super::tensor::softmax_rows;
use super::{DiffError, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Mul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    RowSoftmax(NodeId),
    ColSoftmax(NodeId),
    Exp(NodeId),
    Neg(NodeId),
    Square(NodeId),
    DivScalar(NodeId, NodeId),
    Norm(NodeId),
    RowNorm(NodeId),
    Sum(NodeId),
    BroadcastRows(NodeId),
    BroadcastCols(NodeId),
    Gather(NodeId, Rc<[usize]>),
    ConcatCols(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward pass. Build it, read values, then call [`Graph::backward`].
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input. Receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf bound to a parameter of `store`; `backward` writes its gradient back.
    pub fn param(&mut self, store: &ParamStore, id: &str) -> Result<NodeId, DiffError> {
        let index = store
            .index_of(id)
            .ok_or_else(|| DiffError::UnknownParameter(id.to_string()))?;
        let value = store.get_index(index).value.clone();
        Ok(self.push(value, Op::Param(index)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(mismatch("matmul", va, vb));
        }
        let out = va.matmul(vb).map_err(|_| mismatch("matmul", va, vb))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "transpose",
                left: va.shape().to_vec(),
                right: vec![],
            });
        }
        let out = va.transpose();
        Ok(self.push(out, Op::Transpose(a)))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let (r, c) = va.dims2();
        if va.is_empty() {
            return Err(DiffError::EmptyAxis("row_softmax"));
        }
        let data = softmax_rows(r, c, va.data())?;
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::RowSoftmax(a)))
    }

    /// Softmax down each column of a rank-2 tensor.
    pub fn col_softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let (r, c) = va.dims2();
        if r == 0 || c == 0 {
            return Err(DiffError::EmptyAxis("col_softmax"));
        }
        let t = va.transpose();
        let soft = softmax_rows(c, r, t.data())?;
        let out = Tensor::new(vec![c, r], soft)?.transpose().reshape(va.shape().to_vec())?;
        Ok(self.push(out, Op::ColSoftmax(a)))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| -v);
        self.push(out, Op::Neg(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    /// `a / s` for a one-element node `s` holding a positive value.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, DiffError> {
        let divisor = self.value(s).item()?;
        if !(divisor > 0.0) {
            return Err(DiffError::NonPositiveDivisor(divisor));
        }
        let out = self.value(a).map(|v| v / divisor);
        Ok(self.push(out, Op::DivScalar(a, s)))
    }

    /// L2 norm of all entries, as a scalar.
    pub fn l2norm(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(n), Op::Norm(a))
    }

    /// L2 norm of each row, as an `[rows, 1]` column.
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let norms = (0..va.rows())
            .map(|i| va.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(Tensor::column(norms), Op::RowNorm(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Repeats a length-`c` vector as each of `n` rows, giving `[n, c]`.
    pub fn broadcast_rows(&mut self, v: NodeId, n: usize) -> NodeId {
        let vals = self.value(v).data().to_vec();
        let c = vals.len();
        let out = Tensor::from_fn(n, c, |_, j| vals[j]);
        self.push(out, Op::BroadcastRows(v))
    }

    /// Repeats a length-`r` vector as each of `n` columns, giving `[r, n]`.
    pub fn broadcast_cols(&mut self, v: NodeId, n: usize) -> NodeId {
        let vals = self.value(v).data().to_vec();
        let r = vals.len();
        let out = Tensor::from_fn(r, n, |i, _| vals[i]);
        self.push(out, Op::BroadcastCols(v))
    }

    /// Output entry `k` is input entry `index[k]` (flat, row-major).
    pub fn gather(
        &mut self,
        a: NodeId,
        index: Rc<[usize]>,
        shape: Vec<usize>,
    ) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= va.len()) {
            return Err(DiffError::ShapeMismatch {
                op: "gather",
                left: va.shape().to_vec(),
                right: vec![bad],
            });
        }
        let data = index.iter().map(|&i| va.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather(a, index)))
    }

    /// Concatenates rank-2 nodes with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let first = parts.first().ok_or(DiffError::EmptyAxis("concat_cols"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), v));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..rows {
                data[i * total + offset..i * total + offset + w].copy_from_slice(v.row(i));
            }
            offset += w;
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Reverse pass from a scalar `loss`. Gradients of parameter leaves are
    /// added into `store`, so repeated calls accumulate.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<(), DiffError> {
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::NoForward);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(DiffError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    let param = store.get_index_mut(*p);
                    for (acc, v) in param.grad.data_mut().iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let (m, k) = va.dims2();
                    let n = vb.cols();
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &vb.data()[p * n..(p + 1) * n];
                            ga[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                            let a_ip = va.data()[i * k + p];
                            if a_ip != 0.0 {
                                for (gbv, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                    *gbv += a_ip * gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => {
                    let (r, c) = self.value(*a).dims2();
                    // g has shape [c, r]
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j * r + i];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    let ga = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * f).collect());
                }
                Op::RowSoftmax(a) => {
                    let y = node.value.data();
                    let (r, c) = node.value.dims2();
                    accumulate(&mut grads, *a, softmax_vjp_rows(r, c, y, &g));
                }
                Op::ColSoftmax(a) => {
                    let (r, c) = node.value.dims2();
                    let yt = node.value.transpose();
                    let gt = Tensor::new(vec![r, c], g)?.transpose();
                    let back = softmax_vjp_rows(c, r, yt.data(), gt.data());
                    let ga = Tensor::new(vec![c, r], back)?.transpose().into_data();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    accumulate(&mut grads, *a, g.iter().zip(y).map(|(x, y)| x * y).collect());
                }
                Op::Neg(a) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| -v).collect());
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect());
                }
                Op::DivScalar(a, s) => {
                    let divisor = self.value(*s).data()[0];
                    let x = self.value(*a).data();
                    let ga = g.iter().map(|v| v / divisor).collect();
                    let gs = -g.iter().zip(x).map(|(g, x)| g * x).sum::<f64>() / (divisor * divisor);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *s, vec![gs]);
                }
                Op::Norm(a) => {
                    let n = node.value.data()[0];
                    let x = self.value(*a).data();
                    let ga = if n > 0.0 {
                        x.iter().map(|v| g[0] * v / n).collect()
                    } else {
                        vec![0.0; x.len()]
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNorm(a) => {
                    let va = self.value(*a);
                    let (r, c) = va.dims2();
                    let norms = node.value.data();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        if norms[i] > 0.0 {
                            let scale = g[i] / norms[i];
                            for j in 0..c {
                                ga[i * c + j] = scale * va.data()[i * c + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::BroadcastRows(v) => {
                    let c = self.value(*v).len();
                    let mut gv = vec![0.0; c];
                    for (k, gk) in g.iter().enumerate() {
                        gv[k % c] += gk;
                    }
                    accumulate(&mut grads, *v, gv);
                }
                Op::BroadcastCols(v) => {
                    let r = self.value(*v).len();
                    let n = node.value.cols();
                    let gv = (0..r).map(|i| g[i * n..(i + 1) * n].iter().sum()).collect();
                    accumulate(&mut grads, *v, gv);
                }
                Op::Gather(a, index) => {
                    let mut ga = vec![0.0; self.value(*a).len()];
                    for (&src, gk) in index.iter().zip(&g) {
                        ga[src] += gk;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = vec![0.0; rows * w];
                        for i in 0..rows {
                            gp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += w;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn softmax_vjp_rows(rows: usize, cols: usize, y: &[f64], g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let yr = &y[i * cols..(i + 1) * cols];
        let gr = &g[i * cols..(i + 1) * cols];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            out[i * cols + j] = yr[j] * (gr[j] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut store = ParamStore::new();
        for (id, v) in entries {
            store.insert(id, v.clone()).unwrap();
        }
        store
    }

    fn check(
        build: impl Fn(&mut Graph, &ParamStore) -> Result<NodeId, DiffError>,
        store: &mut ParamStore,
        ids: &[&str],
    ) {
        for c in finite_difference_check(build, store, ids, 1e-6).unwrap() {
            assert!(c.max_rel_error <= 1e-6, "{}: {}", c.id, c.max_rel_error);
        }
    }

    #[test]
    fn elementwise_ops_match_differences() {
        let mut store = store_with(&[("a", random(3, 4, 1)), ("b", random(3, 4, 2))]);
        check(
            |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let m = g.mul(a, b)?;
                let sq = g.square(a);
                let e = g.exp(b);
                let n = g.neg(e);
                let x = g.add(m, sq)?;
                let y = g.sub(x, n)?;
                let z = g.scale(y, 0.7);
                Ok(g.sum(z))
            },
            &mut store,
            &["a", "b"],
        );
    }

    #[test]
    fn matrix_ops_match_differences() {
        let mut store = store_with(&[("a", random(3, 4, 3)), ("b", random(3, 4, 4))]);
        check(
            |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let bt = g.transpose(b)?;
                let m = g.matmul(a, bt)?;
                let r = g.row_softmax(m)?;
                let c = g.col_softmax(a)?;
                let w = g.mul(c, b)?;
                let sw = g.sum(w);
                let sr = g.square(r);
                let total = g.sum(sr);
                g.add(total, sw)
            },
            &mut store,
            &["a", "b"],
        );
    }

    #[test]
    fn norms_and_reshapes_match_differences() {
        let mut store = store_with(&[("a", random(3, 4, 5)), ("s", Tensor::scalar(1.7))]);
        check(
            |g, s| {
                let a = g.param(s, "a")?;
                let d = g.param(s, "s")?;
                let q = g.div_scalar(a, d)?;
                let rn = g.row_norm(q);
                let col = g.broadcast_cols(rn, 2);
                let index: Rc<[usize]> = vec![0, 5, 11, 5].into();
                let picked = g.gather(a, index, vec![4, 1])?;
                let row = g.transpose(picked)?;
                let rows = g.broadcast_rows(row, 3);
                let joined = g.concat_cols(&[col, rows])?;
                let sq = g.square(joined);
                let n = g.l2norm(a);
                let total = g.sum(sq);
                g.add(total, n)
            },
            &mut store,
            &["a", "s"],
        );
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = store_with(&[("a", random(3, 4, 6))]);
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let s = g.sum(a);
        g.backward(s, &mut store).unwrap();
        assert!(store.get("a").unwrap().grad.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_rows_sum_has_zero_gradient() {
        let mut store = store_with(&[("a", random(3, 4, 7))]);
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let r = g.row_softmax(a).unwrap();
        let s = g.sum(r);
        g.backward(s, &mut store).unwrap();
        assert!(store.get("a").unwrap().grad.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn square_gradient_at_three() {
        let mut store = store_with(&[("p", Tensor::scalar(3.0))]);
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let sq = g.square(p);
        g.backward(sq, &mut store).unwrap();
        assert_eq!(store.get("p").unwrap().grad.data(), &[6.0]);
    }

    #[test]
    fn norm_of_three_four() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::column(vec![3.0, 4.0]));
        let n = g.l2norm(v);
        assert_eq!(g.value(n).item().unwrap(), 5.0);
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let r = g.row_softmax(v).unwrap();
        assert_eq!(g.value(r).data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_errors() {
        let mut store = ParamStore::new();
        let g = Graph::new();
        assert_eq!(g.backward(NodeId(0), &mut store), Err(DiffError::NoForward));
        let mut g = Graph::new();
        let v = g.constant(Tensor::column(vec![1.0, 2.0]));
        assert!(matches!(g.backward(v, &mut store), Err(DiffError::NotScalar(_))));
        let zero = g.constant(Tensor::scalar(0.0));
        assert!(g.div_scalar(v, zero).is_err());
    }

    #[test]
    fn gradients_accumulate() {
        let mut store = store_with(&[("p", Tensor::scalar(2.0))]);
        for _ in 0..2 {
            let mut g = Graph::new();
            let p = g.param(&store, "p").unwrap();
            let sq = g.square(p);
            g.backward(sq, &mut store).unwrap();
        }
        assert_eq!(store.get("p").unwrap().grad.data(), &[8.0]);
        store.zero_grad();
        assert_eq!(store.get("p").unwrap().grad.data(), &[0.0]);
    }
}
