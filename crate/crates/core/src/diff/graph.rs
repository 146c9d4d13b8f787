//! Append-only tape for reverse-mode differentiation.
//!
//! Every operation records its inputs by node id, so ids are topologically
//! ordered by construction and `backward` is a single reverse sweep.
//! Gradients accumulate, which makes shared subexpressions (one META
//! embedding feeding several heads and its own loss) come out right.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    ColSums(Var),
    RowMeans(Var),
    ColMeans(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    CosineSim { a: Var, b: Var, eps: f64 },
    LogSoftmaxRows { s: Var, exclude_diagonal: bool },
    SoftmaxRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// How `b` lines up against `a` in a broadcasting binary op.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    let (m, n) = a.shape();
    match b.shape() {
        s if s == (m, n) => Ok(Bcast::Same),
        (1, 1) => Ok(Bcast::Scalar),
        (1, c) if c == n => Ok(Bcast::Row),
        (r, 1) if r == m => Ok(Bcast::Col),
        _ => Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        }),
    }
}

#[inline]
fn bidx(kind: Bcast, cols: usize, i: usize, j: usize) -> usize {
    match kind {
        Bcast::Same => i * cols + j,
        Bcast::Row => j,
        Bcast::Col => i,
        Bcast::Scalar => 0,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: a copy of `t` that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(name, ta, tb)?;
        let (m, n) = ta.shape();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(f(ta.get(i, j), tb.data()[bidx(kind, n, i, j)]));
            }
        }
        Tensor::new(m, n, out)
    }

    /// `a + b`, where `b` may be a row vector, column vector or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Sum across each row: m×n → m×1.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let out = Tensor::new(t.rows(), 1, data).expect("shape");
        let rg = self.rg(a);
        self.push(out, Op::RowSums(a), rg)
    }

    /// Sum down each column: m×n → 1×n.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (d, v) in data.iter_mut().zip(t.row(r)) {
                *d += v;
            }
        }
        let out = Tensor::new(1, t.cols(), data).expect("shape");
        let rg = self.rg(a);
        self.push(out, Op::ColSums(a), rg)
    }

    pub fn row_means(&mut self, a: Var) -> Var {
        let n = self.value(a).cols() as f64;
        let out = self.value(a);
        let data = (0..out.rows())
            .map(|r| out.row(r).iter().sum::<f64>() / n)
            .collect();
        let out = Tensor::new(out.rows(), 1, data).expect("shape");
        let rg = self.rg(a);
        self.push(out, Op::RowMeans(a), rg)
    }

    pub fn col_means(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.rows() as f64;
        let mut data = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (d, v) in data.iter_mut().zip(t.row(r)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m);
        let out = Tensor::new(1, t.cols(), data).expect("shape");
        let rg = self.rg(a);
        self.push(out, Op::ColMeans(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Dimension(format!(
                "gather_rows: index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let out = Tensor::stack_rows(idx.iter().map(|&i| t.row(i)))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let out = Tensor::stack_rows(
            parts
                .iter()
                .flat_map(|&p| {
                    let t = self.value(p);
                    (0..t.rows()).map(move |r| t.row(r))
                }),
        )?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Pairwise cosine similarities between the rows of `a` (m×d) and `b` (n×d).
    ///
    /// Row norms are clamped below by `eps`, so a zero row has similarity 0
    /// to everything and passes no gradient through its norm.
    pub fn cosine_sim_matrix(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::Shape {
                op: "cosine_sim_matrix",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let na = clamped_row_norms(ta, eps);
        let nb = clamped_row_norms(tb, eps);
        let (m, n) = (ta.rows(), tb.rows());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(super::tensor::dot(ta.row(i), tb.row(j)) / (na[i].0 * nb[j].0));
            }
        }
        let out = Tensor::new(m, n, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::CosineSim { a, b, eps }, rg))
    }

    /// Row-wise log-softmax. With `exclude_diagonal`, row `i` normalizes over
    /// `j != i` only and the diagonal output is fixed at 0 with no gradient.
    pub fn log_softmax_row_masked(&mut self, s: Var, exclude_diagonal: bool) -> Result<Var> {
        let t = self.value(s);
        let (m, n) = t.shape();
        if exclude_diagonal {
            if m != n {
                return Err(Error::Shape {
                    op: "log_softmax_row_masked",
                    left: (m, n),
                    right: (n, m),
                });
            }
            if m < 2 {
                return Err(Error::DegenerateBatch(
                    "diagonal-excluded softmax needs at least 2 rows".into(),
                ));
            }
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = t.row(i);
            let included = |j: usize| !(exclude_diagonal && i == j);
            let mx = (0..n)
                .filter(|&j| included(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = mx
                + (0..n)
                    .filter(|&j| included(j))
                    .map(|j| (row[j] - mx).exp())
                    .sum::<f64>()
                    .ln();
            for j in (0..n).filter(|&j| included(j)) {
                out[i * n + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(m, n, out)?;
        let rg = self.rg(s);
        Ok(self.push(
            out,
            Op::LogSoftmaxRows {
                s,
                exclude_diagonal,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, s: Var) -> Var {
        let t = self.value(s);
        let (m, n) = t.shape();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = t.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..n {
                out[i * n + j] = (row[j] - mx).exp() / z;
            }
        }
        let out = Tensor::new(m, n, out).expect("shape");
        let rg = self.rg(s);
        self.push(out, Op::SoftmaxRows(s), rg)
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar `root`, accumulating into every
    /// ancestor that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.shape(root) != (1, 1) {
            return Err(Error::Backward(format!(
                "root must be 1x1, got {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        if !self.rg(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            for (input, contrib) in self.local_grads(id, &op, &g)? {
                if !self.rg(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, op: &Op, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = &self.nodes[id].value;
        let grads = match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let mut v = Vec::with_capacity(2);
                if self.rg(a) {
                    v.push((a, g.matmul(&tb.transpose())?));
                }
                if self.rg(b) {
                    v.push((b, ta.transpose().matmul(g)?));
                }
                v
            }
            Op::Add(a, b) => {
                let kind = broadcast_kind("add", self.value(a), self.value(b))?;
                vec![(a, g.clone()), (b, reduce_to(kind, g, self.shape(b)))]
            }
            Op::Sub(a, b) => {
                let kind = broadcast_kind("sub", self.value(a), self.value(b))?;
                vec![
                    (a, g.clone()),
                    (b, reduce_to(kind, &g.map(|x| -x), self.shape(b))),
                ]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let kind = broadcast_kind("mul", ta, tb)?;
                let (m, n) = ta.shape();
                let mut ga = Tensor::zeros(m, n);
                let mut gb_full = Tensor::zeros(m, n);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.get(i, j);
                        ga.set(i, j, gij * tb.data()[bidx(kind, n, i, j)]);
                        gb_full.set(i, j, gij * ta.get(i, j));
                    }
                }
                vec![(a, ga), (b, reduce_to(kind, &gb_full, tb.shape()))]
            }
            Op::Scale(a, k) => vec![(a, g.map(|x| x * k))],
            Op::AddScalar(a) => vec![(a, g.clone())],
            Op::Tanh(a) => vec![(a, zip_map(g, out, |gv, y| gv * (1.0 - y * y)))],
            Op::Exp(a) => vec![(a, zip_map(g, out, |gv, y| gv * y))],
            Op::Log(a) => vec![(a, zip_map(g, self.value(a), |gv, x| gv / x))],
            Op::Sum(a) => {
                let (m, n) = self.shape(a);
                vec![(a, Tensor::full(m, n, g.item()))]
            }
            Op::Mean(a) => {
                let (m, n) = self.shape(a);
                vec![(a, Tensor::full(m, n, g.item() / (m * n) as f64))]
            }
            Op::RowSums(a) | Op::RowMeans(a) => {
                let (m, n) = self.shape(a);
                let k = if matches!(op, Op::RowMeans(_)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut ga = Tensor::zeros(m, n);
                for i in 0..m {
                    ga.row_mut(i).fill(g.get(i, 0) * k);
                }
                vec![(a, ga)]
            }
            Op::ColSums(a) | Op::ColMeans(a) => {
                let (m, n) = self.shape(a);
                let k = if matches!(op, Op::ColMeans(_)) {
                    1.0 / m as f64
                } else {
                    1.0
                };
                let mut ga = Tensor::zeros(m, n);
                for i in 0..m {
                    for j in 0..n {
                        ga.set(i, j, g.get(0, j) * k);
                    }
                }
                vec![(a, ga)]
            }
            Op::GatherRows(a, ref idx) => {
                let (m, n) = self.shape(a);
                let mut ga = Tensor::zeros(m, n);
                for (r, &src) in idx.iter().enumerate() {
                    for (d, v) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                vec![(a, ga)]
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (m, n) = self.shape(p);
                    let data = g.data()[offset * n..(offset + m) * n].to_vec();
                    v.push((p, Tensor::new(m, n, data)?));
                    offset += m;
                }
                v
            }
            Op::Transpose(a) => vec![(a, g.transpose())],
            Op::CosineSim { a, b, eps } => self.cosine_grads(a, b, eps, out, g),
            Op::LogSoftmaxRows {
                s,
                exclude_diagonal,
            } => {
                let (m, n) = out.shape();
                let mut gs = Tensor::zeros(m, n);
                for i in 0..m {
                    let included = |j: usize| !(exclude_diagonal && i == j);
                    let gsum: f64 = (0..n).filter(|&j| included(j)).map(|j| g.get(i, j)).sum();
                    for j in (0..n).filter(|&j| included(j)) {
                        gs.set(i, j, g.get(i, j) - out.get(i, j).exp() * gsum);
                    }
                }
                vec![(s, gs)]
            }
            Op::SoftmaxRows(s) => {
                let (m, n) = out.shape();
                let mut gs = Tensor::zeros(m, n);
                for i in 0..m {
                    let dotp = super::tensor::dot(g.row(i), out.row(i));
                    for j in 0..n {
                        gs.set(i, j, out.get(i, j) * (g.get(i, j) - dotp));
                    }
                }
                vec![(s, gs)]
            }
        };
        Ok(grads)
    }

    fn cosine_grads(&self, a: Var, b: Var, eps: f64, c: &Tensor, g: &Tensor) -> Vec<(Var, Tensor)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let na = clamped_row_norms(ta, eps);
        let nb = clamped_row_norms(tb, eps);
        let (m, n) = c.shape();
        let d = ta.cols();
        let mut v = Vec::with_capacity(2);
        if self.rg(a) {
            let mut ga = Tensor::zeros(m, d);
            for i in 0..m {
                let mut gc = 0.0;
                let row = ga.row_mut(i);
                for j in 0..n {
                    let gij = g.get(i, j);
                    if gij == 0.0 {
                        continue;
                    }
                    gc += gij * c.get(i, j);
                    let k = gij / (na[i].0 * nb[j].0);
                    for (r, bv) in row.iter_mut().zip(tb.row(j)) {
                        *r += k * bv;
                    }
                }
                if na[i].1 {
                    let k = gc / (na[i].0 * na[i].0);
                    for (r, av) in row.iter_mut().zip(ta.row(i)) {
                        *r -= k * av;
                    }
                }
            }
            v.push((a, ga));
        }
        if self.rg(b) {
            let mut gb = Tensor::zeros(n, d);
            let mut gc = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    let gij = g.get(i, j);
                    if gij == 0.0 {
                        continue;
                    }
                    gc[j] += gij * c.get(i, j);
                    let k = gij / (na[i].0 * nb[j].0);
                    for (r, av) in gb.row_mut(j).iter_mut().zip(ta.row(i)) {
                        *r += k * av;
                    }
                }
            }
            for j in 0..n {
                if nb[j].1 {
                    let k = gc[j] / (nb[j].0 * nb[j].0);
                    let bj = tb.row(j).to_vec();
                    for (r, bv) in gb.row_mut(j).iter_mut().zip(&bj) {
                        *r -= k * bv;
                    }
                }
            }
            v.push((b, gb));
        }
        v
    }
}

/// Clamped row norms, paired with whether the norm was above `eps`.
fn clamped_row_norms(t: &Tensor, eps: f64) -> Vec<(f64, bool)> {
    (0..t.rows())
        .map(|r| {
            let n = super::tensor::norm(t.row(r));
            if n > eps {
                (n, true)
            } else {
                (eps, false)
            }
        })
        .collect()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

/// Sum a full-shape gradient back down to a broadcast operand's shape.
fn reduce_to(kind: Bcast, g: &Tensor, shape: (usize, usize)) -> Tensor {
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::scalar(g.sum()),
        Bcast::Row => {
            let mut out = Tensor::zeros(1, shape.1);
            for i in 0..g.rows() {
                for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            out
        }
        Bcast::Col => {
            let data = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
            Tensor::new(shape.0, 1, data).expect("shape")
        }
    }
}
