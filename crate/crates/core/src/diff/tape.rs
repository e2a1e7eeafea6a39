//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates adjoints; [`Tape::accumulate_param_grads`] then adds the
//! adjoints of parameter leaves into a [`ParameterSet`].

use std::sync::Arc;

use super::{ParamId, ParameterSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    ConstMatMul(Arc<Tensor>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Exp(Var),
    ConcatCols(Var, Var),
    RepeatRows(Var),
    MeanRows(Var),
    Sum(Var),
    RowNorm(Var),
    NormalizeRows(Var),
    LogSoftmaxRows(Var, Option<Vec<bool>>),
    Pick(Var, usize, usize),
    ConcatRows(Vec<Var>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::ConstMatMul(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::RepeatRows(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::RowNorm(a)
            | Op::NormalizeRows(a)
            | Op::LogSoftmaxRows(a, _)
            | Op::Pick(a, _, _) => vec![*a],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any parameter leaf feeds this node.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad =
            matches!(op, Op::Param(_)) || op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient outside the tape.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Input leaf whose gradient is tracked and readable through [`Tape::grad`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Input);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.input(Tensor::scalar(x))
    }

    pub fn param(&mut self, ps: &ParameterSet, id: ParamId) -> Var {
        self.push(ps.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `m · x` where `m` is a constant matrix (e.g. an adjacency operator).
    pub fn const_matmul(&mut self, m: &Arc<Tensor>, x: Var) -> Var {
        let v = m.matmul(self.value(x));
        self.push(v, Op::ConstMatMul(Arc::clone(m), x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a).add_row_broadcast(self.value(row));
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).concat_cols(self.value(b));
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a).repeat_rows(n);
        self.push(v, Op::RepeatRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of each row (`r x 1`). The subgradient at zero is zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows())
            .map(|r| t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let v = Tensor::from_vec(t.rows(), 1, data);
        self.push(v, Op::RowNorm(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).l2_normalize_rows();
        self.push(v, Op::NormalizeRows(a))
    }

    /// Row-wise log-softmax. Entries where `mask` is false are replaced by
    /// `fill` before normalisation and receive no gradient. The mask holds
    /// either one row shared by all rows or one entry per element.
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>, fill: f64) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        if let Some(m) = &mask {
            assert!(m.len() == cols || m.len() == t.len(), "mask size mismatch");
        }
        let mut out = t.clone();
        for r in 0..t.rows() {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            if let Some(m) = &mask {
                let mrow = if m.len() == cols {
                    &m[..]
                } else {
                    &m[r * cols..(r + 1) * cols]
                };
                for (x, &keep) in row.iter_mut().zip(mrow) {
                    if !keep {
                        *x = fill;
                    }
                }
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(a, mask))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = Tensor::scalar(self.value(a).get(r, c));
        self.push(v, Op::Pick(a, r, c))
    }

    /// Stacks row blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Sum of a list of scalar nodes; an empty list yields the constant 0.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut it = terms.iter();
        match it.next() {
            None => self.constant(0.0),
            Some(&first) => it.fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(
            self.value(out).len(),
            1,
            "backward() requires a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if self.nodes[v.0].needs_grad {
                acc(grads, v, t);
            }
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(val(*b));
                let gb = val(*a).t_matmul(g);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::ConstMatMul(m, x) => acc(grads, *x, m.t_matmul(g)),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let mut gr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in gr.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *o += x;
                    }
                }
                acc(grads, *row, gr);
            }
            Op::Scale(a, k) => acc(grads, *a, g.map(|x| k * x)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Relu(a) => acc(
                grads,
                *a,
                g.zip_map(val(*a), |gx, x| if x > 0.0 { gx } else { 0.0 }),
            ),
            Op::Softplus(a) => acc(grads, *a, g.zip_map(val(*a), |gx, x| gx * sigmoid(x))),
            Op::Square(a) => acc(grads, *a, g.zip_map(val(*a), |gx, x| 2.0 * x * gx)),
            Op::Exp(a) => acc(grads, *a, g.zip_map(&node.value, |gx, y| gx * y)),
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row_slice(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(grads, *a, Tensor::from_vec(rows, ca, ga));
                acc(grads, *b, Tensor::from_vec(rows, cb, gb));
            }
            Op::RepeatRows(a) => {
                let mut ga = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in ga.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *o += x;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let rows = val(*a).rows();
                let inv = if rows > 0 { 1.0 / rows as f64 } else { 0.0 };
                acc(grads, *a, g.map(|x| x * inv).repeat_rows(rows));
            }
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                acc(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::RowNorm(a) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = node.value.get(r, 0);
                    if n > 0.0 {
                        let gr = g.get(r, 0) / n;
                        for c in 0..x.cols() {
                            ga.set(r, c, gr * x.get(r, c));
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        let dot: f64 = g
                            .row_slice(r)
                            .iter()
                            .zip(y.row_slice(r))
                            .map(|(a, b)| a * b)
                            .sum();
                        for c in 0..x.cols() {
                            ga.set(r, c, (g.get(r, c) - dot * y.get(r, c)) / n);
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a, mask) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                let cols = y.cols();
                for r in 0..y.rows() {
                    let gsum: f64 = g.row_slice(r).iter().sum();
                    for c in 0..cols {
                        let masked = mask.as_ref().is_some_and(|m| {
                            if m.len() == cols {
                                !m[c]
                            } else {
                                !m[r * cols + c]
                            }
                        });
                        if !masked {
                            ga.set(r, c, g.get(r, c) - y.get(r, c).exp() * gsum);
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Pick(a, r, c) => {
                let [rows, cols] = val(*a).shape();
                let mut ga = Tensor::zeros(rows, cols);
                ga.set(*r, *c, g.item());
                acc(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    let [r, c] = val(*p).shape();
                    let part = Tensor::from_vec(r, c, g.data()[offset..offset + len].to_vec());
                    acc(grads, *p, part);
                    offset += len;
                }
            }
        }
    }

    /// Adds the adjoints of every parameter leaf into `ps`.
    pub fn accumulate_param_grads(&self, ps: &mut ParameterSet) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, self.grads.get(i).and_then(|g| g.as_ref()))
            {
                ps.accumulate_grad(*id, g);
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let a = t.variable(Tensor::row(vec![2.0, 3.0]));
        let b = t.variable(Tensor::row(vec![5.0, 7.0]));
        let p = t.mul(a, b);
        let s = t.sum(p);
        t.backward(s);
        assert_eq!(t.grad(a).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(t.grad(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut t = Tape::new();
        let a = t.variable(Tensor::row(vec![0.0, 1.0, -1.0]));
        let r = t.relu(a);
        let s = t.sum(r);
        t.backward(s);
        assert_eq!(t.grad(a).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn masked_log_softmax_gives_masked_entries_no_gradient() {
        let mut t = Tape::new();
        let a = t.variable(Tensor::row(vec![0.3, -0.2, 1.0, 0.4]));
        let ls = t.log_softmax_rows(a, Some(vec![true, true, false, false]), -1e9);
        assert_eq!(t.value(ls).get(0, 2).exp(), 0.0);
        let e = t.exp(ls);
        let s = t.sum(e);
        t.backward(s);
        let g = t.grad(a).unwrap();
        assert_eq!(g.get(0, 2), 0.0);
        assert_eq!(g.get(0, 3), 0.0);
    }

    #[test]
    fn per_row_mask_and_row_concat() {
        let mut t = Tape::new();
        let a = t.variable(Tensor::from_vec(2, 2, vec![0.0, 0.0, 0.0, 0.0]));
        let ls = t.log_softmax_rows(a, Some(vec![true, true, true, false]), -1e9);
        assert!((t.value(ls).get(0, 1).exp() - 0.5).abs() < 1e-15);
        assert_eq!(t.value(ls).get(1, 0), 0.0);
        let b = t.variable(Tensor::row(vec![1.0, 2.0]));
        let stacked = t.concat_rows(&[ls, b]);
        assert_eq!(t.value(stacked).shape(), [3, 2]);
        let w = t.input(Tensor::from_vec(3, 2, vec![0.0, 0.0, 0.0, 0.0, 3.0, 4.0]));
        let p = t.mul(stacked, w);
        let s = t.sum(p);
        t.backward(s);
        assert_eq!(t.grad(b).unwrap().data(), &[3.0, 4.0]);
        assert!(t.grad(w).is_none());
    }
}
