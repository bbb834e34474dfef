use std::sync::Arc;

use super::matrix::{sigmoid, Matrix};
use super::NumericsError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    /// out[t][i] = rows_term[i] + cols_term[t]; both inputs are column vectors.
    OuterSum { rows_term: NodeId, cols_term: NodeId },
    LeakyRelu(NodeId, f64),
    Elu(NodeId),
    Ln(NodeId),
    /// Per-row softmax over the entries enabled by the mask; rows with no
    /// enabled entry come out all-zero.
    MaskedRowSoftmax(NodeId, Arc<Vec<bool>>),
    /// Per-row normalization x / max(sum_active, clamp) over enabled entries.
    MaskedRowNormalize(NodeId, Arc<Vec<bool>>, f64),
    /// y = (I - a)^{-1} x by forward substitution; a strictly lower.
    SolveUnitLower { a: NodeId, x: NodeId },
    RowSum(NodeId),
    RowLogSumExp(NodeId),
    /// Sum of the enabled rows of a column vector, as a 1x1 node.
    SumRowsMasked(NodeId, Arc<Vec<bool>>),
    /// Elementwise multiply by a fixed multiplier (inverted dropout mask).
    Dropout(NodeId, Arc<Vec<f64>>),
    /// Weighted mean of per-entry binary cross-entropy computed from logits.
    BceWithLogits { logits: NodeId, targets: Arc<Matrix>, weights: Arc<Matrix> },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Reverse-mode tape over matrix operations. Operations are recorded in
/// topological order; `backward` replays analytic adjoints in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Matrix>,
    poison: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// First operation that produced a non-finite value, if any. Values
    /// keep propagating so callers can abort with a diagnostic instead of
    /// crashing mid-pass.
    pub fn poisoned(&self) -> Option<&'static str> {
        self.poison
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. this node.
    pub fn grad(&self, id: NodeId) -> &Matrix {
        assert!(!self.grads.is_empty(), "backward has not been run");
        &self.grads[id.0]
    }

    fn push(&mut self, op_name: &'static str, value: Matrix, op: Op) -> NodeId {
        if self.poison.is_none() && !value.all_finite() {
            self.poison = Some(op_name);
        }
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push("leaf", value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).hadamard(self.value(b));
        self.push("hadamard", v, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push("scale", v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push("matmul", v, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push("transpose", v, Op::Transpose(a))
    }

    pub fn outer_sum(&mut self, rows_term: NodeId, cols_term: NodeId) -> NodeId {
        let r = self.value(rows_term);
        let c = self.value(cols_term);
        assert_eq!(r.cols(), 1, "outer_sum expects column vectors");
        assert_eq!(c.cols(), 1, "outer_sum expects column vectors");
        let mut out = Matrix::zeros(c.rows(), r.rows());
        for t in 0..c.rows() {
            for i in 0..r.rows() {
                out.set(t, i, r.get(i, 0) + c.get(t, 0));
            }
        }
        self.push("outer_sum", out, Op::OuterSum { rows_term, cols_term })
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push("leaky_relu", v, Op::LeakyRelu(a, slope))
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.push("elu", v, Op::Elu(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push("ln", v, Op::Ln(a))
    }

    pub fn masked_row_softmax(&mut self, a: NodeId, mask: Arc<Vec<bool>>) -> NodeId {
        let x = self.value(a);
        assert_eq!(mask.len(), x.rows() * x.cols(), "mask length mismatch");
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let m = &mask[r * x.cols()..(r + 1) * x.cols()];
            let row = x.row(r);
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &on)| on)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue; // no enabled entries in this row
            }
            let mut sum = 0.0;
            for c in 0..row.len() {
                if m[c] {
                    let e = (row[c] - max).exp();
                    out.set(r, c, e);
                    sum += e;
                }
            }
            for c in 0..row.len() {
                if m[c] {
                    out.set(r, c, out.get(r, c) / sum);
                }
            }
        }
        self.push("masked_row_softmax", out, Op::MaskedRowSoftmax(a, mask))
    }

    pub fn masked_row_normalize(&mut self, a: NodeId, mask: Arc<Vec<bool>>, clamp: f64) -> NodeId {
        let x = self.value(a);
        assert_eq!(mask.len(), x.rows() * x.cols(), "mask length mismatch");
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let m = &mask[r * x.cols()..(r + 1) * x.cols()];
            let row = x.row(r);
            if !m.iter().any(|&on| on) {
                continue;
            }
            let sum: f64 = row.iter().zip(m).filter(|(_, &on)| on).map(|(&v, _)| v).sum();
            let denom = sum.max(clamp);
            for c in 0..row.len() {
                if m[c] {
                    out.set(r, c, row[c] / denom);
                }
            }
        }
        self.push("masked_row_normalize", out, Op::MaskedRowNormalize(a, mask, clamp))
    }

    pub fn solve_unit_lower(&mut self, a: NodeId, x: NodeId) -> NodeId {
        let am = self.value(a);
        let xm = self.value(x);
        assert_eq!(am.rows(), am.cols(), "solve_unit_lower: a must be square");
        assert_eq!(am.rows(), xm.rows(), "solve_unit_lower: row mismatch");
        let (n, d) = xm.shape();
        let mut y = Matrix::zeros(n, d);
        for i in 0..n {
            let mut row: Vec<f64> = xm.row(i).to_vec();
            for j in 0..i {
                let w = am.get(i, j);
                if w != 0.0 {
                    let yj = y.row(j);
                    for (acc, &v) in row.iter_mut().zip(yj) {
                        *acc += w * v;
                    }
                }
            }
            y.row_mut(i).copy_from_slice(&row);
        }
        self.push("solve_unit_lower", y, Op::SolveUnitLower { a, x })
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            out.set(r, 0, x.row(r).iter().sum());
        }
        self.push("row_sum", out, Op::RowSum(a))
    }

    pub fn row_logsumexp(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            out.set(r, 0, max + sum.ln());
        }
        self.push("row_logsumexp", out, Op::RowLogSumExp(a))
    }

    pub fn sum_rows_masked(&mut self, a: NodeId, row_mask: Arc<Vec<bool>>) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.cols(), 1, "sum_rows_masked expects a column vector");
        assert_eq!(row_mask.len(), x.rows(), "row mask length mismatch");
        let sum: f64 = (0..x.rows()).filter(|&r| row_mask[r]).map(|r| x.get(r, 0)).sum();
        self.push("sum_rows_masked", Matrix::scalar(sum), Op::SumRowsMasked(a, row_mask))
    }

    /// Inverted-dropout multiply; `multiplier` holds 0 or 1/(1-p) per entry.
    pub fn dropout(&mut self, a: NodeId, multiplier: Arc<Vec<f64>>) -> NodeId {
        let x = self.value(a);
        assert_eq!(multiplier.len(), x.rows() * x.cols(), "dropout mask length mismatch");
        let data: Vec<f64> = x.data().iter().zip(multiplier.iter()).map(|(&v, &m)| v * m).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push("dropout", v, Op::Dropout(a, multiplier))
    }

    /// Mean of `weights`-masked binary cross-entropy over logit entries,
    /// computed in the numerically stable logit form. Zero total weight
    /// yields a zero loss.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: Arc<Matrix>,
        weights: Arc<Matrix>,
    ) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce target shape mismatch");
        assert_eq!(z.shape(), weights.shape(), "bce weight shape mismatch");
        let total_weight: f64 = weights.data().iter().sum();
        let mut acc = 0.0;
        if total_weight > 0.0 {
            for ((&zv, &y), &w) in z.data().iter().zip(targets.data()).zip(weights.data()) {
                if w != 0.0 {
                    let loss = zv.max(0.0) - zv * y + (1.0 + (-zv.abs()).exp()).ln();
                    acc += w * loss;
                }
            }
            acc /= total_weight;
        }
        self.push("bce_with_logits", Matrix::scalar(acc), Op::BceWithLogits {
            logits,
            targets,
            weights,
        })
    }

    /// Propagates gradients from a scalar loss node back to every
    /// reachable node. Each node's gradient has the shape of its value.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss { rows: shape.0, cols: shape.1 });
        }
        let mut grads: Vec<Matrix> =
            self.nodes.iter().map(|n| Matrix::zeros(n.value.rows(), n.value.cols())).collect();
        grads[loss.0].set(0, 0, 1.0);

        for i in (0..=loss.0).rev() {
            let g = std::mem::replace(&mut grads[i], Matrix::zeros(0, 0));
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[a.0].axpy(1.0, &g);
                    grads[b.0].axpy(1.0, &g);
                }
                Op::Sub(a, b) => {
                    grads[a.0].axpy(1.0, &g);
                    grads[b.0].axpy(-1.0, &g);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(&self.nodes[b.0].value);
                    let gb = g.hadamard(&self.nodes[a.0].value);
                    grads[a.0].axpy(1.0, &ga);
                    grads[b.0].axpy(1.0, &gb);
                }
                Op::Scale(a, s) => {
                    grads[a.0].axpy(*s, &g);
                }
                Op::AddScalar(a, _) => {
                    grads[a.0].axpy(1.0, &g);
                }
                Op::Matmul(a, b) => {
                    add_matmul_nt(&mut grads[a.0], &g, &self.nodes[b.0].value);
                    add_matmul_tn(&mut grads[b.0], &self.nodes[a.0].value, &g);
                }
                Op::Transpose(a) => {
                    grads[a.0].axpy(1.0, &g.transpose());
                }
                Op::OuterSum { rows_term, cols_term } => {
                    for t in 0..g.rows() {
                        for i2 in 0..g.cols() {
                            let gv = g.get(t, i2);
                            let cur = grads[rows_term.0].get(i2, 0);
                            grads[rows_term.0].set(i2, 0, cur + gv);
                            let cur = grads[cols_term.0].get(t, 0);
                            grads[cols_term.0].set(t, 0, cur + gv);
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let x = &self.nodes[a.0].value;
                    for (idx, gv) in g.data().iter().enumerate() {
                        let d = if x.data()[idx] >= 0.0 { 1.0 } else { *slope };
                        grads[a.0].data_mut()[idx] += gv * d;
                    }
                }
                Op::Elu(a) => {
                    let y = &self.nodes[i].value;
                    let x = &self.nodes[a.0].value;
                    for (idx, gv) in g.data().iter().enumerate() {
                        let d = if x.data()[idx] > 0.0 { 1.0 } else { y.data()[idx] + 1.0 };
                        grads[a.0].data_mut()[idx] += gv * d;
                    }
                }
                Op::Ln(a) => {
                    let x = &self.nodes[a.0].value;
                    for (idx, gv) in g.data().iter().enumerate() {
                        grads[a.0].data_mut()[idx] += gv / x.data()[idx];
                    }
                }
                Op::MaskedRowSoftmax(a, mask) => {
                    let y = &self.nodes[i].value;
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        let m = &mask[r * cols..(r + 1) * cols];
                        let dot: f64 = (0..cols)
                            .filter(|&c| m[c])
                            .map(|c| g.get(r, c) * y.get(r, c))
                            .sum();
                        for c in 0..cols {
                            if m[c] {
                                let v = y.get(r, c) * (g.get(r, c) - dot);
                                grads[a.0].data_mut()[r * cols + c] += v;
                            }
                        }
                    }
                }
                Op::MaskedRowNormalize(a, mask, clamp) => {
                    let x = &self.nodes[a.0].value;
                    let cols = x.cols();
                    for r in 0..x.rows() {
                        let m = &mask[r * cols..(r + 1) * cols];
                        if !m.iter().any(|&on| on) {
                            continue;
                        }
                        let sum: f64 =
                            (0..cols).filter(|&c| m[c]).map(|c| x.get(r, c)).sum();
                        if sum > *clamp {
                            let d = sum;
                            let num: f64 = (0..cols)
                                .filter(|&c| m[c])
                                .map(|c| g.get(r, c) * x.get(r, c))
                                .sum();
                            for c in 0..cols {
                                if m[c] {
                                    grads[a.0].data_mut()[r * cols + c] +=
                                        g.get(r, c) / d - num / (d * d);
                                }
                            }
                        } else {
                            for c in 0..cols {
                                if m[c] {
                                    grads[a.0].data_mut()[r * cols + c] += g.get(r, c) / clamp;
                                }
                            }
                        }
                    }
                }
                Op::SolveUnitLower { a, x } => {
                    let am = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let (n, d) = y.shape();
                    // z = (I - a)^{-T} g by back substitution.
                    let mut z = Matrix::zeros(n, d);
                    for r in (0..n).rev() {
                        let mut row: Vec<f64> = g.row(r).to_vec();
                        for j in (r + 1)..n {
                            let w = am.get(j, r);
                            if w != 0.0 {
                                let zj = z.row(j);
                                for (acc, &v) in row.iter_mut().zip(zj) {
                                    *acc += w * v;
                                }
                            }
                        }
                        z.row_mut(r).copy_from_slice(&row);
                    }
                    grads[x.0].axpy(1.0, &z);
                    // grad_a = strictly lower part of z y^T (only those
                    // entries are read by the forward substitution).
                    for r in 1..n {
                        for c in 0..r {
                            let dot: f64 =
                                z.row(r).iter().zip(y.row(c)).map(|(&p, &q)| p * q).sum();
                            let cur = grads[a.0].get(r, c);
                            grads[a.0].set(r, c, cur + dot);
                        }
                    }
                }
                Op::RowSum(a) => {
                    let x = &self.nodes[a.0].value;
                    let cols = x.cols();
                    for r in 0..x.rows() {
                        let gv = g.get(r, 0);
                        for c in 0..cols {
                            grads[a.0].data_mut()[r * cols + c] += gv;
                        }
                    }
                }
                Op::RowLogSumExp(a) => {
                    let x = &self.nodes[a.0].value;
                    let cols = x.cols();
                    for r in 0..x.rows() {
                        let gv = g.get(r, 0);
                        let row = x.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for c in 0..cols {
                            let p = (row[c] - max).exp() / sum;
                            grads[a.0].data_mut()[r * cols + c] += gv * p;
                        }
                    }
                }
                Op::SumRowsMasked(a, row_mask) => {
                    let gv = g.get(0, 0);
                    for (r, &on) in row_mask.iter().enumerate() {
                        if on {
                            let cur = grads[a.0].get(r, 0);
                            grads[a.0].set(r, 0, cur + gv);
                        }
                    }
                }
                Op::Dropout(a, multiplier) => {
                    for (idx, gv) in g.data().iter().enumerate() {
                        grads[a.0].data_mut()[idx] += gv * multiplier[idx];
                    }
                }
                Op::BceWithLogits { logits, targets, weights } => {
                    let total_weight: f64 = weights.data().iter().sum();
                    if total_weight > 0.0 {
                        let gv = g.get(0, 0);
                        let z = &self.nodes[logits.0].value;
                        for (idx, (&w, &y)) in
                            weights.data().iter().zip(targets.data()).enumerate()
                        {
                            if w != 0.0 {
                                let s = sigmoid(z.data()[idx]);
                                grads[logits.0].data_mut()[idx] +=
                                    gv * w * (s - y) / total_weight;
                            }
                        }
                    }
                }
            }
            grads[i] = g;
        }
        self.grads = grads;
        Ok(())
    }
}

/// out += a * b^T
fn add_matmul_nt(out: &mut Matrix, a: &Matrix, b: &Matrix) {
    assert_eq!(a.cols(), b.cols(), "add_matmul_nt shape mismatch");
    assert_eq!(out.shape(), (a.rows(), b.rows()), "add_matmul_nt out shape");
    for i in 0..a.rows() {
        let a_row = a.row(i);
        for k in 0..b.rows() {
            let dot: f64 = a_row.iter().zip(b.row(k)).map(|(&p, &q)| p * q).sum();
            let cur = out.get(i, k);
            out.set(i, k, cur + dot);
        }
    }
}

/// out += a^T * b
fn add_matmul_tn(out: &mut Matrix, a: &Matrix, b: &Matrix) {
    assert_eq!(a.rows(), b.rows(), "add_matmul_tn shape mismatch");
    assert_eq!(out.shape(), (a.cols(), b.cols()), "add_matmul_tn out shape");
    let cols = b.cols();
    for i in 0..a.rows() {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (k, &aik) in a_row.iter().enumerate() {
            if aik != 0.0 {
                let out_row = &mut out.data_mut()[k * cols..(k + 1) * cols];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }

    /// Central finite differences of a scalar-valued graph builder with
    /// respect to one leaf input, compared against the analytic gradient
    /// at `checks` random coordinates.
    fn check_gradient(
        build: impl Fn(&mut Graph, &Matrix) -> NodeId,
        input: &Matrix,
        checks: usize,
        seed: u64,
        tolerance: f64,
    ) {
        // Convention: the first leaf the builder records is the
        // differentiated input, so it always lands at NodeId(0).
        let mut g = Graph::new();
        let loss = build(&mut g, input);
        g.backward(loss).unwrap();
        let analytic = g.grad(NodeId(0)).clone();

        let mut rng = SplitMix64::new(seed);
        let h = 1e-4;
        for _ in 0..checks {
            let idx = rng.below(input.rows() * input.cols());
            let mut plus = input.clone();
            plus.data_mut()[idx] += h;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= h;
            let mut gp = Graph::new();
            let lp = build(&mut gp, &plus);
            let mut gm = Graph::new();
            let lm = build(&mut gm, &minus);
            let fd = (gp.value(lp).as_scalar() - gm.value(lm).as_scalar()) / (2.0 * h);
            let an = analytic.data()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((fd - an) / denom).abs() < tolerance,
                "coordinate {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let rs = g.row_sum(w);
        let mask = Arc::new(vec![true, true]);
        let loss = g.sum_rows_masked(rs, mask);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_branch_has_zero_gradient() {
        let mut g = Graph::new();
        let used = g.leaf(Matrix::scalar(3.0));
        let unused = g.leaf(Matrix::scalar(5.0));
        let loss = g.scale(used, 2.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).as_scalar(), 0.0);
        assert_eq!(g.grad(used).as_scalar(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.leaf(Matrix::zeros(2, 2));
        let y = g.scale(w, 1.0);
        assert!(matches!(g.backward(y), Err(NumericsError::NonScalarLoss { rows: 2, cols: 2 })));
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        // Mean squared error of W H against a fixed target, through an ELU.
        let mut rng = SplitMix64::new(91);
        let h = random_matrix(4, 6, &mut rng);
        let target = random_matrix(4, 3, &mut rng);
        let w = random_matrix(6, 3, &mut rng);
        let build = move |g: &mut Graph, input: &Matrix| {
            let w_node = g.leaf(input.clone());
            let h_node = g.leaf(h.clone());
            let t_node = g.leaf(target.clone());
            let y = g.matmul(h_node, w_node);
            let y = g.elu(y);
            let d = g.sub(y, t_node);
            let sq = g.hadamard(d, d);
            let rs = g.row_sum(sq);
            let s = g.sum_rows_masked(rs, Arc::new(vec![true; 4]));
            g.scale(s, 1.0 / 12.0)
        };
        check_gradient(build, &w, 18, 5, 1e-4);
    }

    #[test]
    fn solve_unit_lower_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(17);
        let x = random_matrix(5, 3, &mut rng);
        let mut a = Matrix::zeros(5, 5);
        for i in 1..5 {
            for j in 0..i {
                a.set(i, j, rng.uniform(-0.4, 0.4));
            }
        }
        // Gradient w.r.t. the solve input x.
        let a_c = a.clone();
        let build_x = move |g: &mut Graph, input: &Matrix| {
            let x_node = g.leaf(input.clone());
            let a_node = g.leaf(a_c.clone());
            let y = g.solve_unit_lower(a_node, x_node);
            let sq = g.hadamard(y, y);
            let rs = g.row_sum(sq);
            g.sum_rows_masked(rs, Arc::new(vec![true; 5]))
        };
        check_gradient(build_x, &x, 15, 6, 1e-4);
        // Gradient w.r.t. the strictly lower entries of a.
        let x_c = x.clone();
        let build_a = move |g: &mut Graph, input: &Matrix| {
            let a_node = g.leaf(input.clone());
            let x_node = g.leaf(x_c.clone());
            let y = g.solve_unit_lower(a_node, x_node);
            let sq = g.hadamard(y, y);
            let rs = g.row_sum(sq);
            g.sum_rows_masked(rs, Arc::new(vec![true; 5]))
        };
        let mut checked = 0;
        let mut g0 = Graph::new();
        let a_node = g0.leaf(a.clone());
        let x_node = g0.leaf(x.clone());
        let y = g0.solve_unit_lower(a_node, x_node);
        let sq = g0.hadamard(y, y);
        let rs = g0.row_sum(sq);
        let loss = g0.sum_rows_masked(rs, Arc::new(vec![true; 5]));
        g0.backward(loss).unwrap();
        let analytic = g0.grad(a_node).clone();
        let h = 1e-4;
        for i in 1..5 {
            for j in 0..i {
                let mut plus = a.clone();
                plus.set(i, j, plus.get(i, j) + h);
                let mut minus = a.clone();
                minus.set(i, j, minus.get(i, j) - h);
                let mut gp = Graph::new();
                let lp = build_a(&mut gp, &plus);
                let mut gm = Graph::new();
                let lm = build_a(&mut gm, &minus);
                let fd = (gp.value(lp).as_scalar() - gm.value(lm).as_scalar()) / (2.0 * h);
                let an = analytic.get(i, j);
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(((fd - an) / denom).abs() < 1e-4, "a[{i}][{j}]: fd {fd} vs {an}");
                checked += 1;
            }
        }
        assert_eq!(checked, 10);
    }

    #[test]
    fn masked_softmax_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(23);
        let x = random_matrix(4, 4, &mut rng);
        let mut mask = vec![false; 16];
        for t in 0..4 {
            for i in 0..t {
                mask[t * 4 + i] = true;
            }
        }
        let mask = Arc::new(mask);
        let weights = random_matrix(4, 4, &mut rng);
        let build = move |g: &mut Graph, input: &Matrix| {
            let x_node = g.leaf(input.clone());
            let w_node = g.leaf(weights.clone());
            let sm = g.masked_row_softmax(x_node, mask.clone());
            let prod = g.hadamard(sm, w_node);
            let rs = g.row_sum(prod);
            g.sum_rows_masked(rs, Arc::new(vec![true; 4]))
        };
        check_gradient(build, &x, 16, 9, 1e-4);
    }

    #[test]
    fn masked_normalize_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(29);
        // Keep entries positive so the denominator stays well clear of the
        // clamp across the finite-difference perturbations.
        let x = Matrix::from_vec(3, 3, (0..9).map(|_| rng.uniform(0.5, 1.5)).collect());
        let mut mask = vec![false; 9];
        for t in 0..3 {
            for i in 0..t {
                mask[t * 3 + i] = true;
            }
        }
        let mask = Arc::new(mask);
        let weights = random_matrix(3, 3, &mut rng);
        let build = move |g: &mut Graph, input: &Matrix| {
            let x_node = g.leaf(input.clone());
            let w_node = g.leaf(weights.clone());
            let nm = g.masked_row_normalize(x_node, mask.clone(), 1e-8);
            let prod = g.hadamard(nm, w_node);
            let rs = g.row_sum(prod);
            g.sum_rows_masked(rs, Arc::new(vec![true; 3]))
        };
        check_gradient(build, &x, 9, 13, 1e-4);
    }

    #[test]
    fn composite_op_gradient_spot_check_100_coordinates() {
        // Composition touching most op kinds: outer_sum, leaky_relu, ln,
        // logsumexp, bce, transpose.
        let mut rng = SplitMix64::new(37);
        let x = random_matrix(5, 4, &mut rng);
        let targets = Arc::new(Matrix::from_vec(
            5,
            5,
            (0..25).map(|_| f64::from(u8::from(rng.next_bool(0.5)))).collect(),
        ));
        let weights = Arc::new(Matrix::from_vec(
            5,
            5,
            (0..25).map(|_| f64::from(u8::from(rng.next_bool(0.8)))).collect(),
        ));
        let build = move |g: &mut Graph, input: &Matrix| {
            let x_node = g.leaf(input.clone());
            let xt = g.transpose(x_node);
            let gram = g.matmul(x_node, xt);
            let act = g.leaky_relu(gram, 0.2);
            let bce = g.bce_with_logits(act, targets.clone(), weights.clone());
            let sq = g.hadamard(x_node, x_node);
            let soft = g.add_scalar(sq, 1.0);
            let lns = g.ln(soft);
            let lse = g.row_logsumexp(lns);
            let s2 = g.sum_rows_masked(lse, Arc::new(vec![true, true, true, false, true]));
            let s2 = g.scale(s2, 0.25);
            g.add(bce, s2)
        };
        check_gradient(build, &x, 100, 41, 1e-4);
    }

    #[test]
    fn poison_flag_reports_first_bad_op() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(-1.0));
        let _ = g.ln(x); // ln(-1) = NaN
        assert_eq!(g.poisoned(), Some("ln"));
    }
}
