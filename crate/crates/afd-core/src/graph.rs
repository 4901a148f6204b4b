//! Reverse-mode automatic differentiation on a flat tape of matrix nodes.
//!
//! Each forward pass builds a fresh [`Graph`]; `backward` walks the tape in
//! reverse and accumulates gradients for every node that needs them. The op
//! set is exactly what the affordance head, the routed scheduler, and the
//! training losses require - nothing more.

use crate::numeric::matrix::Matrix;
use crate::numeric::prob::softmax_unchecked;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Ln(NodeId),
    Hadamard(NodeId, NodeId),
    /// Row-wise softmax of x / temperature.
    SoftmaxRows(NodeId, f64),
    /// n x m -> n x 1 row sums.
    RowSums(NodeId),
    /// n x m -> 1 x m column means.
    MeanRows(NodeId),
    /// y[i, j] = x[i, j] / d[i, 0].
    DivRows(NodeId, NodeId),
    /// y = x + broadcast row b (1 x m).
    AddRowBroadcast(NodeId, NodeId),
    /// n x m -> 1 x 1 sum of all entries.
    SumAll(NodeId),
    /// 1 x 1 pick of entry (i, j).
    Select(NodeId, usize, usize),
    /// Rows of a table gathered by fixed indices.
    GatherRows(NodeId, Vec<usize>),
    /// y = s * x with s a 1 x 1 node.
    ScalarMul(NodeId, NodeId),
    /// n x m -> n x 1 row-wise log-sum-exp.
    LogSumExpRows(NodeId),
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to node `id`; zero matrix
    /// if the node never received a contribution.
    pub fn grad(&self, g: &Graph, id: NodeId) -> Matrix {
        match &self.grads[id.0] {
            Some(m) => m.clone(),
            None => {
                let v = g.value(id);
                Matrix::zeros(v.rows(), v.cols())
            }
        }
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

    #[inline]
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    #[inline]
    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf.
    pub fn var(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Matrix::new(1, 1, vec![v]).expect("finite scalar"))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), value, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), value, needs)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(Op::Transpose(a), value, needs)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = v.clone();
        for x in out.data_mut() {
            *x = x.tanh();
        }
        let needs = self.needs(a);
        self.push(Op::Tanh(a), out, needs)
    }

    /// Elementwise natural log; caller guarantees positive entries.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = v.clone();
        for x in out.data_mut() {
            debug_assert!(*x > 0.0, "ln of non-positive entry");
            *x = x.ln();
        }
        let needs = self.needs(a);
        self.push(Op::Ln(a), out, needs)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).hadamard(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Hadamard(a, b), value, needs)
    }

    pub fn softmax_rows(&mut self, a: NodeId, temperature: f64) -> NodeId {
        let v = self.value(a);
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            let p = softmax_unchecked(v.row(r), temperature);
            out.row_mut(r).copy_from_slice(&p);
        }
        let needs = self.needs(a);
        self.push(Op::SoftmaxRows(a, temperature), out, needs)
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = Matrix::zeros(v.rows(), 1);
        for r in 0..v.rows() {
            out.set(r, 0, v.row(r).iter().sum());
        }
        let needs = self.needs(a);
        self.push(Op::RowSums(a), out, needs)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let inv = 1.0 / v.rows() as f64;
        let mut out = Matrix::zeros(1, v.cols());
        for r in 0..v.rows() {
            for (o, &x) in out.row_mut(0).iter_mut().zip(v.row(r)) {
                *o += x * inv;
            }
        }
        let needs = self.needs(a);
        self.push(Op::MeanRows(a), out, needs)
    }

    pub fn div_rows(&mut self, x: NodeId, d: NodeId) -> NodeId {
        let xv = self.value(x);
        let dv = self.value(d);
        assert_eq!(xv.rows(), dv.rows(), "div_rows row mismatch");
        assert_eq!(dv.cols(), 1, "div_rows divisor must be n x 1");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let inv = 1.0 / dv.at(r, 0);
            for v in out.row_mut(r) {
                *v *= inv;
            }
        }
        let needs = self.needs(x) || self.needs(d);
        self.push(Op::DivRows(x, d), out, needs)
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(bv.rows(), 1, "broadcast row must be 1 x m");
        assert_eq!(xv.cols(), bv.cols(), "broadcast width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &a) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += a;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(Op::AddRowBroadcast(x, b), out, needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), Matrix::new(1, 1, vec![total]).unwrap(), needs)
    }

    pub fn select(&mut self, a: NodeId, i: usize, j: usize) -> NodeId {
        let v = self.value(a).at(i, j);
        let needs = self.needs(a);
        self.push(Op::Select(a, i, j), Matrix::new(1, 1, vec![v]).unwrap(), needs)
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Matrix::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let needs = self.needs(table);
        self.push(Op::GatherRows(table, idx.to_vec()), out, needs)
    }

    pub fn scalar_mul(&mut self, s: NodeId, x: NodeId) -> NodeId {
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "scalar_mul scale must be 1 x 1");
        let value = self.value(x).scale(sv.at(0, 0));
        let needs = self.needs(s) || self.needs(x);
        self.push(Op::ScalarMul(s, x), value, needs)
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = Matrix::zeros(v.rows(), 1);
        for r in 0..v.rows() {
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            out.set(r, 0, max + sum.ln());
        }
        let needs = self.needs(a);
        self.push(Op::LogSumExpRows(a), out, needs)
    }

    /// Scalar value of a 1 x 1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "scalar_value of non-scalar node");
        v.at(0, 0)
    }

    /// Reverse pass from a 1 x 1 root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::new(1, 1, vec![1.0]).unwrap());

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(&mut grads, id, &g);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Matrix>], target: NodeId, delta: Matrix) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.axpy(1.0, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: usize, g: &Matrix) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.scale(-1.0));
            }
            Op::Scale(a, c) => {
                self.add_grad(grads, *a, g.scale(*c));
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.add_grad(grads, *a, g.matmul_tb(self.value(*b)));
                }
                if self.needs(*b) {
                    self.add_grad(grads, *b, self.value(*a).matmul_ta(g));
                }
            }
            Op::Transpose(a) => {
                self.add_grad(grads, *a, g.transpose());
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let mut d = g.clone();
                for (dv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *dv *= 1.0 - yv * yv;
                }
                self.add_grad(grads, *a, d);
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv /= xv;
                }
                self.add_grad(grads, *a, d);
            }
            Op::Hadamard(a, b) => {
                if self.needs(*a) {
                    self.add_grad(grads, *a, g.hadamard(self.value(*b)));
                }
                if self.needs(*b) {
                    self.add_grad(grads, *b, g.hadamard(self.value(*a)));
                }
            }
            Op::SoftmaxRows(a, temperature) => {
                let y = &self.nodes[id].value;
                let inv_t = 1.0 / temperature;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = inv_t * yr[c] * (gr[c] - dot);
                    }
                }
                self.add_grad(grads, *a, d);
            }
            Op::RowSums(a) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gr = g.at(r, 0);
                    for dv in d.row_mut(r) {
                        *dv = gr;
                    }
                }
                self.add_grad(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let inv = 1.0 / x.rows() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (dv, &gv) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                        *dv = gv * inv;
                    }
                }
                self.add_grad(grads, *a, d);
            }
            Op::DivRows(x, dnode) => {
                let xv = self.value(*x);
                let dv = self.value(*dnode);
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let inv = 1.0 / dv.at(r, 0);
                        for v in dx.row_mut(r) {
                            *v *= inv;
                        }
                    }
                    self.add_grad(grads, *x, dx);
                }
                if self.needs(*dnode) {
                    let mut dd = Matrix::zeros(dv.rows(), 1);
                    for r in 0..dv.rows() {
                        let den = dv.at(r, 0);
                        let acc: f64 = g
                            .row(r)
                            .iter()
                            .zip(xv.row(r))
                            .map(|(&gv, &x_)| gv * x_)
                            .sum();
                        dd.set(r, 0, -acc / (den * den));
                    }
                    self.add_grad(grads, *dnode, dd);
                }
            }
            Op::AddRowBroadcast(x, b) => {
                self.add_grad(grads, *x, g.clone());
                if self.needs(*b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (dv, &gv) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                let gv = g.at(0, 0);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for v in d.data_mut() {
                    *v = gv;
                }
                self.add_grad(grads, *a, d);
            }
            Op::Select(a, i, j) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                d.set(*i, *j, g.at(0, 0));
                self.add_grad(grads, *a, d);
            }
            Op::GatherRows(table, idx) => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (dv, &gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *dv += gv;
                    }
                }
                self.add_grad(grads, *table, d);
            }
            Op::ScalarMul(s, x) => {
                if self.needs(*s) {
                    let ds = g.dot(self.value(*x));
                    self.add_grad(grads, *s, Matrix::new(1, 1, vec![ds]).unwrap());
                }
                if self.needs(*x) {
                    self.add_grad(grads, *x, g.scale(self.value(*s).at(0, 0)));
                }
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let y = &self.nodes[id].value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let lse = y.at(r, 0);
                    let gr = g.at(r, 0);
                    for (dv, &xv) in d.row_mut(r).iter_mut().zip(x.row(r)) {
                        *dv = gr * (xv - lse).exp();
                    }
                }
                self.add_grad(grads, *a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Checks d(loss)/d(var) for a scalar loss built by `build` against
    /// central differences over the flattened variable entries.
    fn check_op<F>(rows: usize, cols: usize, seed: u64, tol: f64, build: F)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.1..1.5)).collect();

        let mut g = Graph::new();
        let v = g.var(Matrix::new(rows, cols, x.clone()).unwrap());
        let loss = build(&mut g, v);
        let grads = g.backward(loss);
        let analytic = grads.grad(&g, v);

        let f = |p: &[f64]| {
            let mut g2 = Graph::new();
            let v2 = g2.var(Matrix::new(rows, cols, p.to_vec()).unwrap());
            let l2 = build(&mut g2, v2);
            g2.scalar_value(l2)
        };
        let err = grad_check(f, &x, analytic.data(), 1e-5).unwrap();
        assert!(err < tol, "op gradient error {err}");
    }

    #[test]
    fn matmul_and_transpose_backward() {
        check_op(3, 4, 1, 1e-7, |g, v| {
            let c = g.constant(Matrix::new(4, 2, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap());
            let m = g.matmul(v, c);
            let t = g.transpose(m);
            let sq = g.hadamard(t, t);
            g.sum_all(sq)
        });
        // gradient into the right operand too
        check_op(4, 2, 2, 1e-7, |g, v| {
            let c = g.constant(Matrix::new(3, 4, (0..12).map(|i| (i as f64).sin()).collect()).unwrap());
            let m = g.matmul(c, v);
            let sq = g.hadamard(m, m);
            g.sum_all(sq)
        });
    }

    #[test]
    fn tanh_ln_softmax_backward() {
        check_op(2, 3, 3, 1e-6, |g, v| {
            let t = g.tanh(v);
            let sq = g.hadamard(t, t);
            g.sum_all(sq)
        });
        check_op(2, 3, 4, 1e-6, |g, v| {
            let l = g.ln(v);
            g.sum_all(l)
        });
        check_op(2, 4, 5, 1e-6, |g, v| {
            let s = g.softmax_rows(v, 0.7);
            let w = g.constant(Matrix::new(2, 4, (0..8).map(|i| i as f64 * 0.25).collect()).unwrap());
            let h = g.hadamard(s, w);
            g.sum_all(h)
        });
    }

    #[test]
    fn reduction_ops_backward() {
        check_op(3, 3, 6, 1e-6, |g, v| {
            let rs = g.row_sums(v);
            let sq = g.hadamard(rs, rs);
            g.sum_all(sq)
        });
        check_op(3, 3, 7, 1e-6, |g, v| {
            let m = g.mean_rows(v);
            let sq = g.hadamard(m, m);
            g.sum_all(sq)
        });
        check_op(2, 5, 8, 1e-6, |g, v| {
            let lse = g.log_sum_exp_rows(v);
            g.sum_all(lse)
        });
        check_op(3, 4, 9, 1e-6, |g, v| g.select(v, 1, 2));
    }

    #[test]
    fn div_rows_and_broadcast_backward() {
        check_op(3, 4, 10, 1e-6, |g, v| {
            let d = g.row_sums(v);
            let q = g.div_rows(v, d);
            let w = g.constant(Matrix::new(3, 4, (0..12).map(|i| 0.1 * i as f64).collect()).unwrap());
            let h = g.hadamard(q, w);
            g.sum_all(h)
        });
        check_op(1, 4, 11, 1e-6, |g, v| {
            let x = g.constant(Matrix::new(3, 4, (0..12).map(|i| (i as f64).cos()).collect()).unwrap());
            let y = g.add_row_broadcast(x, v);
            let sq = g.hadamard(y, y);
            g.sum_all(sq)
        });
    }

    #[test]
    fn gather_scalar_mul_backward() {
        check_op(5, 3, 12, 1e-6, |g, v| {
            let rows = g.gather_rows(v, &[0, 2, 2, 4]);
            let m = g.mean_rows(rows);
            let sq = g.hadamard(m, m);
            g.sum_all(sq)
        });
        check_op(2, 2, 13, 1e-6, |g, v| {
            let s = g.select(v, 0, 0);
            let prod = g.scalar_mul(s, v);
            g.sum_all(prod)
        });
    }

    #[test]
    fn composite_chain_backward() {
        // A longer chain resembling one routed layer with attention.
        check_op(4, 4, 14, 1e-5, |g, v| {
            let u = g.constant(Matrix::new(3, 4, (0..12).map(|i| 0.2 * (i as f64) - 1.0).collect()).unwrap());
            let k = g.constant(Matrix::new(5, 4, (0..20).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap());
            let kt = g.transpose(k);
            let vt = g.transpose(v);
            let q = g.matmul(u, vt);
            let scores = g.matmul(q, kt);
            let scaled = g.scale(scores, 0.5);
            let attn = g.softmax_rows(scaled, 1.0);
            let kv = g.matmul(attn, k);
            let pooled = g.mean_rows(kv);
            let sq = g.hadamard(pooled, pooled);
            g.sum_all(sq)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::identity(2));
        let v = g.var(Matrix::identity(2));
        let s = g.add(c, v);
        let loss = g.sum_all(s);
        let grads = g.backward(loss);
        assert!(grads.grads[c.0].is_none());
        assert_eq!(grads.grad(&g, v).data(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
