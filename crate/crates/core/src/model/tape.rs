//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records operations in evaluation order. Parameter leaves borrow
//! from the [`ParamStore`]; everything else is owned by its node.

use super::params::{Gradients, ParamStore};
use super::tensor::{dot, Matrix};
use std::f64::consts::LN_2;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One row of a soft-target loss over a logits matrix.
#[derive(Clone, Debug)]
pub struct SoftTarget {
    pub row: usize,
    /// Sums to 1.
    pub dist: Vec<f64>,
    pub weight: f64,
    /// KL divergence when set, cross-entropy otherwise. Both share a gradient.
    pub kl: bool,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    SoftTargetLoss {
        logits: Var,
        targets: Vec<SoftTarget>,
        probs: Vec<Vec<f64>>,
    },
    Bce {
        logit: Var,
        label: f64,
        weight: f64,
    },
}

enum Value {
    Param(usize),
    Owned(Matrix),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Param(id) => self.params.value(*id),
            Value::Owned(m) => m,
        }
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    /// Parameter by name; panics if absent (names are fixed by the architecture).
    pub fn named(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(m),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).matmul(self.value(b));
        self.push(m, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).matmul_bt(self.value(b));
        self.push(m, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut m = self.value(a).clone();
        m.add_assign(self.value(b));
        self.push(m, Op::Add(a, b), &[a, b])
    }

    /// Adds the 1×n `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!((1, self.value(a).cols()), r.shape(), "add_row shape");
        let r = r.row(0).to_vec();
        let mut m = self.value(a).clone();
        for i in 0..m.rows() {
            for (x, b) in m.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(m, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let m = self.value(a).scaled(s);
        self.push(m, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let m = self.value(a).map(gelu);
        self.push(m, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with learned 1×n gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, n) = xv.shape();
        let mut xhat = Matrix::zeros(rows, n);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let mut y = xhat.clone();
        for i in 0..rows {
            for ((o, gj), bj) in y.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gj + bj;
            }
        }
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut m = Matrix::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            m.row_mut(i).copy_from_slice(&softmax(av.row(i)));
        }
        self.push(m, Op::SoftmaxRows(a), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let m = Matrix::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec());
        self.push(m, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let mut m = Matrix::zeros(av.rows(), len);
        for i in 0..av.rows() {
            m.row_mut(i).copy_from_slice(&av.row(i)[start..start + len]);
        }
        self.push(m, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows shape");
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut m = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols shape");
            for i in 0..rows {
                m.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        self.push(m, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        self.push(
            Matrix::from_vec(idx.len(), c, data),
            Op::Gather(table, idx.to_vec()),
            &[table],
        )
    }

    /// Weighted sum over `targets` of per-row KL or cross-entropy in bits, as a 1×1 value.
    pub fn soft_target_loss(&mut self, logits: Var, targets: Vec<SoftTarget>) -> Var {
        let lv = self.value(logits);
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for t in &targets {
            let ls = log_softmax(lv.row(t.row));
            let mut row = 0.0;
            for (&p, &l) in t.dist.iter().zip(&ls) {
                if p > 0.0 {
                    row += if t.kl { p * (p.ln() - l) } else { -p * l };
                }
            }
            total += t.weight * row / LN_2;
            probs.push(ls.iter().map(|l| l.exp()).collect());
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::SoftTargetLoss { logits, targets, probs },
            &[logits],
        )
    }

    /// Weighted binary cross-entropy in bits of the 1×1 `logit` against `label`.
    pub fn bce(&mut self, logit: Var, label: bool, weight: f64) -> Var {
        let z = self.value(logit).get(0, 0);
        let y = if label { 1.0 } else { 0.0 };
        let v = weight * bce_nats(z, label) / LN_2;
        self.push(
            Matrix::from_vec(1, 1, vec![v]),
            Op::Bce {
                logit,
                label: y,
                weight,
            },
            &[logit],
        )
    }

    /// Gradients of the 1×1 `root` with respect to every parameter.
    /// Parameters not reached from `root` get zero gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, Var(i), &g, &mut grads);
        }
        let mut out = Gradients::zeros_like(self.params).into_values();
        for (id, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads[v.0].take() {
                    out[id] = g;
                }
            }
        }
        Gradients::from_values(out)
    }

    fn propagate(&self, op: &Op, out: Var, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(m) => m.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_bt(self.value(*b)));
                acc(*b, self.value(*a).matmul_at(g));
            }
            Op::MatMulBt(a, b) => {
                // out = a bᵀ; da = g b; db = gᵀ a
                acc(*a, g.matmul(self.value(*b)));
                acc(*b, g.matmul_at(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, column_sums(g));
            }
            Op::Scale(a, s) => acc(*a, g.scaled(*s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = x.data().iter().zip(g.data()).map(|(&x, &g)| g * gelu_grad(x)).collect();
                acc(*a, Matrix::from_vec(x.rows(), x.cols(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).row(0);
                let (rows, n) = xhat.shape();
                let mut dx = Matrix::zeros(rows, n);
                let mut dg = Matrix::zeros(1, n);
                for (i, &is) in inv_std.iter().enumerate().take(rows) {
                    let gi = g.row(i);
                    let xh = xhat.row(i);
                    let dxhat: Vec<f64> = gi.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2 = dot(&dxhat, xh);
                    let k = is / n as f64;
                    for j in 0..n {
                        dx.set(i, j, k * (n as f64 * dxhat[j] - s1 - xh[j] * s2));
                        dg.data_mut()[j] += gi[j] * xh[j];
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, column_sums(g));
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(out);
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s = dot(g.row(i), y.row(i));
                    for ((o, &yi), &gi) in d.row_mut(i).iter_mut().zip(y.row(i)).zip(g.row(i)) {
                        *o = yi * (gi - s);
                    }
                }
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                let c = av.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    acc(p, Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec()));
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut d = Matrix::zeros(g.rows(), pc);
                    for i in 0..g.rows() {
                        d.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                    }
                    acc(p, d);
                    off += pc;
                }
            }
            Op::Gather(table, idx) => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &gv) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += gv;
                    }
                }
                acc(*table, d);
            }
            Op::SoftTargetLoss { logits, targets, probs } => {
                let up = g.get(0, 0);
                let lv = self.value(*logits);
                let mut d = Matrix::zeros(lv.rows(), lv.cols());
                for (t, q) in targets.iter().zip(probs) {
                    let k = up * t.weight / LN_2;
                    for ((o, &qc), &pc) in d.row_mut(t.row).iter_mut().zip(q).zip(&t.dist) {
                        *o += k * (qc - pc);
                    }
                }
                acc(*logits, d);
            }
            Op::Bce { logit, label, weight } => {
                let z = self.value(*logit).get(0, 0);
                let d = g.get(0, 0) * weight * (sigmoid(z) - label) / LN_2;
                acc(*logit, Matrix::from_vec(1, 1, vec![d]));
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut s = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in s.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy in nats of logit `z` against `label`.
pub fn bce_nats(z: f64, label: bool) -> f64 {
    if label {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// Natural-log softmax with max subtraction.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// A scalar that exercises every op.
    fn build(tape: &mut Tape) -> Var {
        let a = tape.named("a");
        let b = tape.named("b");
        let g = tape.named("g");
        let beta = tape.named("beta");
        let row = tape.named("row");
        let ab = tape.matmul(a, b); // 3x4
        let ab = tape.add_row(ab, row);
        let ln = tape.layer_norm(ab, g, beta);
        let ge = tape.gelu(ln);
        let s = tape.matmul_bt(ge, ln); // 3x3
        let s = tape.scale(s, 0.5);
        let p = tape.softmax_rows(s);
        let left = tape.slice_cols(p, 0, 2);
        let right = tape.slice_cols(p, 2, 1);
        let cc = tape.concat_cols(&[right, left]);
        let top = tape.slice_rows(cc, 0, 1);
        let rest = tape.slice_rows(cc, 1, 2);
        let rr = tape.concat_rows(&[rest, top]);
        let sum = tape.add(rr, p);
        let gathered = tape.gather(b, &[1, 0, 1]);
        let mixed = tape.matmul(sum, gathered); // 3x4
        let l1 = tape.soft_target_loss(
            mixed,
            vec![
                SoftTarget {
                    row: 0,
                    dist: vec![0.1, 0.2, 0.3, 0.4],
                    weight: 0.7,
                    kl: true,
                },
                SoftTarget {
                    row: 2,
                    dist: vec![0.0, 1.0, 0.0, 0.0],
                    weight: 1.0,
                    kl: false,
                },
            ],
        );
        let z = tape.slice_cols(mixed, 3, 1);
        let z = tape.slice_rows(z, 1, 1);
        let l2 = tape.bce(z, true, 0.5);
        tape.add(l1, l2)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamStore::new();
        p.push("a", random(&mut rng, 3, 2));
        p.push("b", random(&mut rng, 2, 4));
        p.push("g", random(&mut rng, 1, 4));
        p.push("beta", random(&mut rng, 1, 4));
        p.push("row", random(&mut rng, 1, 4));
        let grads = {
            let mut t = Tape::new(&p);
            let root = build(&mut t);
            t.backward(root)
        };
        let eval = |p: &ParamStore| {
            let mut t = Tape::new(p);
            let root = build(&mut t);
            t.value(root).get(0, 0)
        };
        let h = 1e-5;
        for id in 0..p.len() {
            for k in 0..p.value(id).len() {
                let mut plus = p.clone();
                plus.value_mut(id).data_mut()[k] += h;
                let mut minus = p.clone();
                minus.value_mut(id).data_mut()[k] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.get(id).data()[k];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{}[{k}]: fd {fd} vs analytic {an}",
                    p.name(id)
                );
            }
        }
    }

    #[test]
    fn unreached_parameters_get_zero() {
        let mut p = ParamStore::new();
        p.push("used", Matrix::from_vec(1, 1, vec![2.0]));
        p.push("unused", Matrix::from_vec(1, 1, vec![3.0]));
        let mut t = Tape::new(&p);
        let u = t.named("used");
        let _ = t.named("unused");
        let root = t.bce(u, false, 1.0);
        let g = t.backward(root);
        assert_ne!(g.get(0).get(0, 0), 0.0);
        assert_eq!(g.get(1).get(0, 0), 0.0);
    }

    #[test]
    fn stable_primitives() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        let ls = log_softmax(&[1000.0, 0.0]);
        assert_eq!(ls[0], 0.0);
        assert!(ls[1].is_finite());
    }
}
