use std::cell::{Cell, RefCell};

use super::tensor::Tensor;
use super::AutodiffError;

/// Handle to a node in a [`Graph`]. Cheap to copy; only meaningful for the
/// graph that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Elu(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanGroups(Var, usize),
    ConcatRows(Vec<Var>),
    RowL2Normalize(Var),
    SoftmaxCrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    LogSumExp(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use reverse-mode computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. Gradients are propagated once from a scalar root by
/// [`Graph::backward`]; a second call is an error.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`. `None` for nodes that do not
    /// require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but panics for nodes without a gradient.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .unwrap_or_else(|| panic!("node {} has no gradient", v.0))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn unary(&self, a: Var, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)
        };
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x.zip_map(y, |p, q| p + q))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x.zip_map(y, |p, q| p - q))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x.zip_map(y, |p, q| p * q))
    }

    /// Adds the `1 × n` vector `row` to every row of the `m × n` matrix `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, Op::AddRow(a, row), |x, r| {
            assert_eq!(r.rows(), 1, "add_row expects a single row");
            assert_eq!(x.cols(), r.cols(), "add_row width mismatch");
            let mut out = x.clone();
            let n = x.cols();
            for chunk in out.data_mut().chunks_mut(n) {
                for (o, &v) in chunk.iter_mut().zip(r.data()) {
                    *o += v;
                }
            }
            out
        })
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x.map(|v| v * k))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x.map(|v| v + k))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMul(a, b), |x, y| x.matmul(y))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Op::Transpose(a), Tensor::transpose)
    }

    /// ELU with α = 1.
    pub fn elu(&self, a: Var) -> Var {
        self.unary(a, Op::Elu(a), |x| x.map(elu))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.map(f64::exp))
    }

    /// Square root. The derivative at exactly zero is taken as zero so that a
    /// degenerate spread contributes no gradient.
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.map(f64::sqrt))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x.map(|v| v * v))
    }

    /// Clamp into `[lo, hi]`; zero gradient where the bound is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.map(|v| v.clamp(lo, hi)))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, Op::SumAll(a), |x| Tensor::scalar(x.data().iter().sum()))
    }

    /// Mean of consecutive blocks of `group` rows: `(g·m) × n → m × n`.
    pub fn mean_groups(&self, a: Var, group: usize) -> Var {
        self.unary(a, Op::MeanGroups(a, group), |x| {
            assert!(group > 0 && x.rows() % group == 0, "mean_groups: bad group");
            let n = x.cols();
            let m = x.rows() / group;
            let mut out = Tensor::zeros(m, n);
            for g in 0..m {
                for r in 0..group {
                    let src = x.row_slice(g * group + r);
                    for (c, &v) in src.iter().enumerate() {
                        let o = out.get(g, c) + v;
                        out.set(g, c, o);
                    }
                }
            }
            out.map(|v| v / group as f64)
        })
    }

    /// Mean over all rows: `m × n → 1 × n`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let rows = self.shape(a)[0];
        self.mean_groups(a, rows)
    }

    /// Stacks the inputs vertically. All inputs must share a column count.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one input");
        let out = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                assert_eq!(t.cols(), cols, "concat_rows width mismatch");
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(rows, cols, data)
        };
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Normalizes every row to unit Euclidean length.
    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut out = x.clone();
            let n = x.cols();
            for (r, chunk) in out.data_mut().chunks_mut(n).enumerate() {
                let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(AutodiffError::NonFinite("l2 normalize"));
                }
                if norm == 0.0 {
                    return Err(AutodiffError::ZeroNorm { row: r });
                }
                chunk.iter_mut().for_each(|v| *v /= norm);
            }
            out
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::RowL2Normalize(a), rg))
    }

    /// `−log softmax(logits)[label]` for a `1 × C` logit row.
    pub fn softmax_cross_entropy(&self, logits: Var, label: usize) -> Result<Var, AutodiffError> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let z = &nodes[logits.0].value;
            if z.rows() != 1 {
                return Err(AutodiffError::Shape(format!(
                    "softmax_cross_entropy expects a single row of logits, got {:?}",
                    z.shape()
                )));
            }
            let classes = z.cols();
            if classes < 2 {
                return Err(AutodiffError::TooFewClasses(classes));
            }
            if label >= classes {
                return Err(AutodiffError::LabelOutOfRange { label, classes });
            }
            let probs = softmax(z.data());
            (cross_entropy_value(z.data(), label), probs)
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// `log Σ exp(a_i)` over every entry, as a scalar.
    pub fn log_sum_exp(&self, a: Var) -> Var {
        self.unary(a, Op::LogSumExp(a), |x| Tensor::scalar(log_sum_exp(x.data())))
    }

    /// Propagates gradients from the scalar `root` to every node that requires
    /// them. Leaves requiring gradients that the root does not depend on get
    /// zero gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.0].value.shape();
        if root_shape != [1, 1] {
            return Err(AutodiffError::NonScalarRoot(root_shape));
        }
        if self.consumed.replace(true) {
            return Err(AutodiffError::BackwardTwice);
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }

        for id in (0..=root.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let mut send = |target: Var, g: Tensor| {
                if !nodes[target.0].requires_grad {
                    return;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.axpy(1.0, &g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their accumulated gradient.
                    grads[id] = Some(upstream);
                    continue;
                }
                Op::Add(a, b) => {
                    send(*a, upstream.clone());
                    send(*b, upstream);
                }
                Op::Sub(a, b) => {
                    send(*b, upstream.map(|v| -v));
                    send(*a, upstream);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    send(*a, upstream.zip_map(bv, |g, y| g * y));
                    send(*b, upstream.zip_map(av, |g, x| g * x));
                }
                Op::AddRow(a, row) => {
                    let n = upstream.cols();
                    let mut rg = vec![0.0; n];
                    for chunk in upstream.data().chunks(n) {
                        for (acc, &v) in rg.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    send(*row, Tensor::row(&rg));
                    send(*a, upstream);
                }
                Op::Scale(a, k) => send(*a, upstream.map(|v| v * k)),
                Op::AddScalar(a) => send(*a, upstream),
                Op::MatMul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    if nodes[a.0].requires_grad {
                        send(*a, upstream.matmul(&bv.transpose()));
                    }
                    if nodes[b.0].requires_grad {
                        send(*b, av.transpose().matmul(&upstream));
                    }
                }
                Op::Transpose(a) => send(*a, upstream.transpose()),
                Op::Elu(a) => {
                    let x = &nodes[a.0].value;
                    send(*a, upstream.zip_map(x, |g, v| g * elu_grad(v)));
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    send(*a, upstream.zip_map(y, |g, v| g * v));
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    send(
                        *a,
                        upstream.zip_map(y, |g, v| if v > 0.0 { g * 0.5 / v } else { 0.0 }),
                    );
                }
                Op::Square(a) => {
                    let x = &nodes[a.0].value;
                    send(*a, upstream.zip_map(x, |g, v| 2.0 * g * v));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &nodes[a.0].value;
                    let (lo, hi) = (*lo, *hi);
                    send(
                        *a,
                        upstream.zip_map(x, |g, v| if v >= lo && v <= hi { g } else { 0.0 }),
                    );
                }
                Op::SumAll(a) => {
                    let [r, c] = nodes[a.0].value.shape();
                    send(*a, Tensor::filled(r, c, upstream.item()));
                }
                Op::MeanGroups(a, group) => {
                    let [r, c] = nodes[a.0].value.shape();
                    let mut g = Tensor::zeros(r, c);
                    let inv = 1.0 / *group as f64;
                    for row in 0..r {
                        let src = upstream.row_slice(row / group);
                        for (col, &v) in src.iter().enumerate() {
                            g.set(row, col, v * inv);
                        }
                    }
                    send(*a, g);
                }
                Op::ConcatRows(parts) => {
                    let cols = upstream.cols();
                    let mut offset = 0;
                    for p in parts {
                        let rows = nodes[p.0].value.rows();
                        let slice = upstream.data()[offset * cols..(offset + rows) * cols].to_vec();
                        send(*p, Tensor::new(rows, cols, slice));
                        offset += rows;
                    }
                }
                Op::RowL2Normalize(a) => {
                    // d(x/|x|) = (g − y (y·g)) / |x|
                    let x = &nodes[a.0].value;
                    let y = &node.value;
                    let n = x.cols();
                    let mut out = Tensor::zeros(x.rows(), n);
                    for r in 0..x.rows() {
                        let xr = x.row_slice(r);
                        let yr = y.row_slice(r);
                        let gr = upstream.row_slice(r);
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            out.set(r, c, (gr[c] - yr[c] * dot) / norm);
                        }
                    }
                    send(*a, out);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let g = upstream.item();
                    let mut d = probs.clone();
                    d[*label] -= 1.0;
                    send(*logits, Tensor::row(&d).map(|v| v * g));
                }
                Op::LogSumExp(a) => {
                    let x = &nodes[a.0].value;
                    let g = upstream.item();
                    let s = softmax(x.data());
                    send(*a, Tensor::new(x.rows(), x.cols(), s).map(|v| v * g));
                }
            }
        }

        // Leaves that require gradients but were not reached get zeros.
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                let [r, c] = node.value.shape();
                grads[id] = Some(Tensor::zeros(r, c));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

pub fn elu_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        v.exp()
    }
}

/// Numerically stable `log Σ exp`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log Σ exp(z_i) − z_label`, using `ln_1p` when the label holds the maximum
/// so that confident predictions keep full relative precision.
fn cross_entropy_value(z: &[f64], label: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if z[label] == m {
        let rest: f64 = z
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != label)
            .map(|(_, v)| (v - m).exp())
            .sum();
        rest.ln_1p()
    } else {
        log_sum_exp(z) - z[label]
    }
}

/// Max-subtracted softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
