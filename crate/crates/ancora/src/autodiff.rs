//! Reverse-mode automatic differentiation over f64 matrices.
//!
//! A `Tape` is an append-only arena of nodes; every operation records
//! its parents and enough payload to replay the chain rule backwards.
//! The op set is exactly what the model, projection heads, and losses
//! need, each with a hand-derived adjoint. All adjoints are exercised
//! against central finite differences in this module's tests, which is
//! what lets the higher layers treat `backward` as ground truth.
//!
//! Values are computed eagerly, so a forward pass can be inspected
//! before deciding to differentiate. Losses must be 1x1 nodes.

use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    /// Matrix plus a broadcast row vector (bias add).
    AddRow(VarId, VarId),
    Matmul(VarId, VarId),
    /// A (r x k) times B^T with B (c x k).
    MatmulTransB(VarId, VarId),
    Transpose(VarId),
    GatherRows(VarId, Vec<usize>),
    ConcatRows(Vec<VarId>),
    /// Mean over a row subset, yielding 1 x cols.
    MeanRows(VarId, Vec<usize>),
    MulConst(VarId, Matrix),
    AddConst(VarId),
    Gelu(VarId),
    SoftmaxRows(VarId),
    LogSoftmaxRows(VarId),
    /// RMS normalization with a broadcast gain row: x, gain, eps.
    RmsNorm(VarId, VarId, f64),
    L2NormalizeRows(VarId),
    SumAll(VarId),
}

struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar w.r.t. `id`; zero matrix
    /// if the node does not influence it.
    pub fn wrt(&self, id: VarId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probed feature).
    pub fn leaf(&mut self, value: Matrix) -> VarId {
        self.push(Op::Leaf, value)
    }

    /// A fixed input; mechanically identical to a leaf, the name marks
    /// intent at call sites (cached features, masks, targets).
    pub fn constant(&mut self, value: Matrix) -> VarId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: VarId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "scalar() on non-scalar node");
        v.get(0, 0)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).hadamard(self.value(b));
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row shape mismatch");
        let mut v = self.value(a).clone();
        for i in 0..r {
            for j in 0..c {
                let b = self.value(row).get(0, j);
                v.set(i, j, v.get(i, j) + b);
            }
        }
        self.push(Op::AddRow(a, row), v)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::Matmul(a, b), v)
    }

    pub fn matmul_transpose_b(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul_transpose_b(self.value(b));
        self.push(Op::MatmulTransB(a, b), v)
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn gather_rows(&mut self, table: VarId, rows: Vec<usize>) -> VarId {
        let t = self.value(table);
        let mut v = Matrix::zeros(rows.len(), t.cols());
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < t.rows(), "gather_rows: row {r} out of range");
            v.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push(Op::GatherRows(table, rows), v)
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat_rows on empty list");
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::vstack(&mats);
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn mean_rows(&mut self, a: VarId, rows: Vec<usize>) -> VarId {
        let v = self.value(a).mean_rows(&rows);
        self.push(Op::MeanRows(a, rows), v)
    }

    pub fn mul_const(&mut self, a: VarId, mask: Matrix) -> VarId {
        let v = self.value(a).hadamard(&mask);
        self.push(Op::MulConst(a, mask), v)
    }

    pub fn add_const(&mut self, a: VarId, m: &Matrix) -> VarId {
        let v = self.value(a).add(m);
        self.push(Op::AddConst(a), v)
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let mut v = self.value(a).clone();
        for x in v.as_mut_slice() {
            *x = gelu(*x);
        }
        self.push(Op::Gelu(a), v)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let v = softmax_rows_value(self.value(a));
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut v = Matrix::zeros(r, c);
        for i in 0..r {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&e| (e - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                v.set(i, j, row[j] - lse);
            }
        }
        self.push(Op::LogSoftmaxRows(a), v)
    }

    pub fn rms_norm(&mut self, a: VarId, gain: VarId, eps: f64) -> VarId {
        let x = self.value(a);
        let g = self.value(gain);
        let (r, c) = x.shape();
        assert_eq!(g.shape(), (1, c), "rms_norm gain shape mismatch");
        let mut v = Matrix::zeros(r, c);
        for i in 0..r {
            let row = x.row(i);
            let ms = row.iter().map(|e| e * e).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..c {
                v.set(i, j, row[j] * inv * g.get(0, j));
            }
        }
        self.push(Op::RmsNorm(a, gain, eps), v)
    }

    pub fn l2_normalize_rows(&mut self, a: VarId) -> VarId {
        let v = self.value(a).normalize_rows();
        self.push(Op::L2NormalizeRows(a), v)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(Op::SumAll(a), v)
    }

    /// Sum of the main diagonal, as a scalar node. Composite.
    pub fn trace(&mut self, a: VarId) -> VarId {
        let (r, c) = self.value(a).shape();
        assert_eq!(r, c, "trace on non-square matrix");
        let masked = self.mul_const(a, Matrix::identity(r));
        self.sum_all(masked)
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: VarId) -> Gradients {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::ones(1, 1));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.hadamard(self.value(*b));
                let gb = g.hadamard(self.value(*a));
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::Scale(a, c) => add_grad(grads, *a, g.scale(*c)),
            Op::AddRow(a, row) => {
                add_grad(grads, *a, g.clone());
                let mut rg = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        rg.set(0, c, rg.get(0, c) + g.get(r, c));
                    }
                }
                add_grad(grads, *row, rg);
            }
            Op::Matmul(a, b) => {
                let ga = g.matmul_transpose_b(self.value(*b));
                let gb = self.value(*a).transpose().matmul(g);
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::MatmulTransB(a, b) => {
                let ga = g.matmul(self.value(*b));
                let gb = g.transpose().matmul(self.value(*a));
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::Transpose(a) => add_grad(grads, *a, g.transpose()),
            Op::GatherRows(table, rows) => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..t.cols() {
                        gt.set(r, c, gt.get(r, c) + g.get(i, c));
                    }
                }
                add_grad(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pr = self.value(*p).rows();
                    let mut gp = Matrix::zeros(pr, g.cols());
                    for r in 0..pr {
                        gp.row_mut(r).copy_from_slice(g.row(offset + r));
                    }
                    add_grad(grads, *p, gp);
                    offset += pr;
                }
            }
            Op::MeanRows(a, rows) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                let inv = 1.0 / rows.len() as f64;
                for &r in rows {
                    for c in 0..src.cols() {
                        ga.set(r, c, ga.get(r, c) + g.get(0, c) * inv);
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::MulConst(a, mask) => add_grad(grads, *a, g.hadamard(mask)),
            Op::AddConst(a) => add_grad(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (gv, xv) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    *gv *= gelu_prime(*xv);
                }
                add_grad(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                // dx = y * (g - <g, y>_row)
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y
                        .row(r)
                        .iter()
                        .zip(g.row(r))
                        .map(|(yv, gv)| yv * gv)
                        .sum();
                    for c in 0..y.cols() {
                        ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g - softmax(x) * rowsum(g)
                let y = &node.value; // log-probabilities
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for c in 0..y.cols() {
                        ga.set(r, c, g.get(r, c) - y.get(r, c).exp() * gsum);
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::RmsNorm(a, gain, eps) => {
                let x = self.value(*a);
                let gn = self.value(*gain);
                let (rows, cols) = x.shape();
                let n = cols as f64;
                let mut ga = Matrix::zeros(rows, cols);
                let mut gg = Matrix::zeros(1, cols);
                for r in 0..rows {
                    let row = x.row(r);
                    let ms = row.iter().map(|e| e * e).sum::<f64>() / n;
                    let inv = 1.0 / (ms + eps).sqrt();
                    // s = sum_j dy_j * gain_j * x_j
                    let mut s = 0.0;
                    for c in 0..cols {
                        s += g.get(r, c) * gn.get(0, c) * row[c];
                    }
                    for c in 0..cols {
                        let dxi =
                            inv * gn.get(0, c) * g.get(r, c) - inv.powi(3) / n * row[c] * s;
                        ga.set(r, c, dxi);
                        gg.set(0, c, gg.get(0, c) + g.get(r, c) * row[c] * inv);
                    }
                }
                add_grad(grads, *a, ga);
                add_grad(grads, *gain, gg);
            }
            Op::L2NormalizeRows(a) => {
                // dx = (g - y * <y, g>_row) / ||x||
                let x = self.value(*a);
                let y = &node.value;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = x.row_l2_norm(r);
                    let dot: f64 = y
                        .row(r)
                        .iter()
                        .zip(g.row(r))
                        .map(|(yv, gv)| yv * gv)
                        .sum();
                    for c in 0..x.cols() {
                        ga.set(r, c, (g.get(r, c) - y.get(r, c) * dot) / norm);
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let src = self.value(*a);
                let s = g.get(0, 0);
                add_grad(grads, *a, Matrix::from_vec(src.rows(), src.cols(), vec![s; src.len()]));
            }
        }
    }
}

fn add_grad(grads: &mut [Option<Matrix>], id: VarId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => *existing = existing.add(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Row softmax with max subtraction; shared by tape and value-only code.
pub fn softmax_rows_value(x: &Matrix) -> Matrix {
    let (r, c) = x.shape();
    let mut v = Matrix::zeros(r, c);
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            v.set(i, j, e);
            denom += e;
        }
        for j in 0..c {
            v.set(i, j, v.get(i, j) / denom);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, fd_step, relative_error};

    /// FD-checks d(scalar build(xs))/d(x[k]) for every entry of every input.
    fn check_op(
        inputs: &[Matrix],
        build: impl Fn(&mut Tape, &[VarId]) -> VarId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss);

        for (pi, base) in inputs.iter().enumerate() {
            let analytic = grads.wrt(ids[pi]).cloned().unwrap_or_else(|| {
                Matrix::zeros(base.rows(), base.cols())
            });
            for k in 0..base.len() {
                let x0 = base.as_slice()[k];
                let fd = central_difference(
                    |x| {
                        let mut probe = inputs.to_vec();
                        probe[pi].as_mut_slice()[k] = x;
                        let mut t = Tape::new();
                        let pids: Vec<VarId> =
                            probe.iter().map(|m| t.leaf(m.clone())).collect();
                        let l = build(&mut t, &pids);
                        t.scalar(l)
                    },
                    x0,
                    fd_step(x0),
                );
                let a = analytic.as_slice()[k];
                let rel = relative_error(a, fd);
                assert!(
                    rel < tol,
                    "input {pi} entry {k}: analytic {a:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
                );
            }
        }
    }

    fn m(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::randn(rows, cols, 1.0, seed)
    }

    #[test]
    fn grad_add_sub_mul_scale() {
        check_op(&[m(3, 4, 1), m(3, 4, 2)], |t, v| {
            let a = t.add(v[0], v[1]);
            let b = t.sub(a, v[1]);
            let c = t.mul(b, v[1]);
            let d = t.scale(c, 1.7);
            t.sum_all(d)
        }, 1e-6);
    }

    #[test]
    fn grad_matmul_both_orientations() {
        check_op(&[m(3, 4, 3), m(4, 2, 4)], |t, v| {
            let c = t.matmul(v[0], v[1]);
            t.sum_all(c)
        }, 1e-6);
        check_op(&[m(3, 4, 5), m(2, 4, 6)], |t, v| {
            let c = t.matmul_transpose_b(v[0], v[1]);
            let sq = t.mul(c, c);
            t.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_add_row_and_transpose() {
        check_op(&[m(3, 4, 7), m(1, 4, 8)], |t, v| {
            let a = t.add_row(v[0], v[1]);
            let at = t.transpose(a);
            let sq = t.mul(at, at);
            t.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_gather_concat_mean() {
        check_op(&[m(5, 3, 9), m(2, 3, 10)], |t, v| {
            let g = t.gather_rows(v[0], vec![4, 0, 0, 2]);
            let c = t.concat_rows(&[g, v[1]]);
            let p = t.mean_rows(c, vec![0, 2, 5]);
            let sq = t.mul(p, p);
            t.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_gelu_softmax_logsoftmax() {
        check_op(&[m(4, 5, 11)], |t, v| {
            let g = t.gelu(v[0]);
            let s = t.softmax_rows(g);
            let l = t.log_softmax_rows(s);
            let sq = t.mul(l, s);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn grad_rmsnorm_and_l2norm() {
        check_op(&[m(3, 6, 12), m(1, 6, 13)], |t, v| {
            let n = t.rms_norm(v[0], v[1], 1e-6);
            let u = t.l2_normalize_rows(n);
            let sq = t.mul(u, u);
            let w = t.mul(sq, u);
            t.sum_all(w)
        }, 1e-5);
    }

    #[test]
    fn grad_reused_node_accumulates() {
        check_op(&[m(3, 3, 14)], |t, v| {
            let a = t.mul(v[0], v[0]);
            let b = t.add(a, v[0]);
            let c = t.matmul(b, v[0]);
            t.sum_all(c)
        }, 1e-5);
    }

    #[test]
    fn grad_masked_trace_path() {
        check_op(&[m(4, 4, 15)], |t, v| {
            let l = t.log_softmax_rows(v[0]);
            let d = t.trace(l);
            t.scale(d, -0.25)
        }, 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_with_extreme_logits() {
        let x = Matrix::from_rows(&[vec![1000.0, 999.0, -1000.0], vec![-1e9, 0.0, 0.0]]);
        let y = softmax_rows_value(&x);
        for r in 0..2 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.row(r).iter().all(|v| v.is_finite()));
        }
    }
}
