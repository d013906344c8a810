use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a vector matching the last axis of lhs
    Row,
    /// rhs holds a single value
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Binary { kind: BinKind, a: Var, b: Var, bcast: Bcast },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    Select { x: Var, idx: Vec<(usize, usize)> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Abs { x: Var },
    Log { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    Reshape { x: Var },
    Transpose { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. Nodes that do not depend on any `requires_grad` leaf
/// are kept only as values and skipped by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the `requires_grad` leaves, produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_EPS: f64 = 1e-5;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn layer_norm_row(row: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..row.len() {
        out[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
    }
}

pub(crate) fn gelu_value(x: f64) -> f64 {
    gelu(x)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op: node_op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got shape {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (br, bc) = self.mat_dims("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}{}", self.shape(a), self.shape(b), if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    fn bcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(b).numel() == 1 {
            Ok(Bcast::Scalar)
        } else if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            Ok(Bcast::Row)
        } else {
            Err(shape_err(op, format!("cannot broadcast {:?} onto {:?}", sb, sa)))
        }
    }

    fn binary(&mut self, op: &'static str, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let bcast = self.bcast_kind(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let data: Vec<f64> = match bcast {
            Bcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.data().iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Row => {
                let c = bv.len();
                av.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % c])).collect()
            }
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(op, value, Op::Binary { kind, a, b, bcast }, &[a, b])
    }

    /// Elementwise `a + b`; `b` may be equal-shape, a row vector over the last
    /// axis of `a`, or a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinKind::Sub, a, b)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())?;
        self.push("scale", value, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a + c).collect())?;
        self.push("add_scalar", value, Op::AddScalar { x }, &[x])
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, node: Op) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?;
        self.push(op, value, node, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log { x })
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        self.unary("clamp", x, |a| a.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        let mut out = vec![0.0; v.numel()];
        for (row, o) in v.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(row, o);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { x }, &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        let mut out = vec![0.0; v.numel()];
        for (row, o) in v.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            for (oj, &a) in o.iter_mut().zip(row) {
                *oj = a - lse;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax { x }, &[x])
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).cols();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err(
                    "layer_norm",
                    format!("parameter {:?} does not match width {}", self.shape(p), c),
                ));
            }
        }
        let v = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = v.numel() / c;
        let mut out = vec![0.0; v.numel()];
        let mut xhat = vec![0.0; v.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &v.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Rows of a matrix picked by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.mat_dims("gather_rows", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!("row id {bad} out of range for table with {r} rows")));
        }
        let value = self.value(table).select_rows(ids);
        debug_assert_eq!(value.cols(), c);
        self.push("gather_rows", value, Op::GatherRows { table, ids: ids.to_vec() }, &[table])
    }

    /// Entries `(row, col)` of a matrix, as a vector.
    pub fn select(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.mat_dims("select", x)?;
        if let Some(&(i, j)) = idx.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::Input(format!("entry ({i}, {j}) out of range for {r}x{c}")));
        }
        let v = self.value(x);
        let value = Tensor::vector(idx.iter().map(|&(i, j)| v.at(i, j)).collect());
        self.push("select", value, Op::Select { x, idx: idx.to_vec() }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(shape_err("mean", "empty input".into()));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Concatenate vectors (axis 0) or matrices along rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let rank = first.len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(shape_err("concat", format!("axis {axis} invalid for shape {:?}", first)));
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            let ok = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == first[d]);
            if !ok {
                return Err(shape_err("concat", format!("{:?} vs {:?} along axis {axis}", first, s)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let value = if rank == 1 || axis == 0 {
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            let mut shape = first.clone();
            shape[0] = total;
            Tensor::new(shape, data)?
        } else {
            let rows = first[0];
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// A contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() > 2 || start + len > s[axis] {
            return Err(shape_err("narrow", format!("[{start}, {}) on axis {axis} of {:?}", start + len, s)));
        }
        let v = self.value(x);
        let value = if s.len() == 1 || axis == 0 {
            let inner: usize = s[1..].iter().product();
            let data = v.data()[start * inner..(start + len) * inner].to_vec();
            let mut shape = s.clone();
            shape[0] = len;
            Tensor::new(shape, data)?
        } else {
            let (r, c) = (s[0], s[1]);
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&v.data()[i * c + start..i * c + start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        self.push("narrow", value, Op::Narrow { x, axis, start, len }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat_dims("transpose", x)?;
        let v = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        self.push("transpose", value, Op::Transpose { x }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradients of every
    /// `requires_grad` leaf and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
            // keep nothing for interior nodes
        }

        let out = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => Some(match grads[i].take() {
                    Some(g) => Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"),
                    None => Tensor::zeros(n.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (a, b, trans_b) = (*a, *b, *trans_b);
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = out.shape()[1];
            // dA = dC · op(b)ᵀ
            accumulate(grads, nodes, a, |ga| {
                gemm(m, n, k, g, false, bv.data(), !trans_b, 1.0, ga);
            });
            accumulate(grads, nodes, b, |gb| {
                if trans_b {
                    // b is n×k: dB = dCᵀ · A
                    gemm(n, m, k, g, true, av.data(), false, 1.0, gb);
                } else {
                    // b is k×n: dB = Aᵀ · dC
                    gemm(k, m, n, av.data(), true, g, false, 1.0, gb);
                }
            });
        }
        Op::Binary { kind, a, b, bcast } => {
            let (a, b) = (*a, *b);
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let bidx = |j: usize| match bcast {
                Bcast::Same => j,
                Bcast::Scalar => 0,
                Bcast::Row => j % bv.len(),
            };
            accumulate(grads, nodes, a, |ga| match kind {
                BinKind::Add | BinKind::Sub => ga.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                BinKind::Mul => {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[bidx(j)];
                    }
                }
            });
            accumulate(grads, nodes, b, |gb| {
                for j in 0..g.len() {
                    let d = match kind {
                        BinKind::Add => g[j],
                        BinKind::Sub => -g[j],
                        BinKind::Mul => g[j] * av[j],
                    };
                    gb[bidx(j)] += d;
                }
            });
        }
        Op::Scale { x, c } => {
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
        }
        Op::AddScalar { x } => {
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
        }
        Op::Gelu { x } => {
            let xv = nodes[x.0].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * gelu_grad(xv[j]);
                }
            });
        }
        Op::Sigmoid { x } => {
            let y = out.data();
            accumulate(grads, nodes, *x, |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            });
        }
        Op::Softmax { x } => {
            let y = out.data();
            let c = out.cols();
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..y.len() / c {
                    let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += ys[j] * (gs[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax { x } => {
            let y = out.data();
            let c = out.cols();
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..y.len() / c {
                    let gs = &g[r * c..(r + 1) * c];
                    let total: f64 = gs.iter().sum();
                    for j in 0..c {
                        gx[r * c + j] += gs[j] - y[r * c + j].exp() * total;
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let c = out.cols();
            let rows = rstd.len();
            let gam = nodes[gamma.0].value.data();
            accumulate(grads, nodes, *gamma, |gg| {
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
            });
            accumulate(grads, nodes, *beta, |gb| {
                for r in 0..rows {
                    for j in 0..c {
                        gb[j] += g[r * c + j];
                    }
                }
            });
            accumulate(grads, nodes, *x, |gx| {
                let cf = c as f64;
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = g[r * c + j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xhat[r * c + j];
                    }
                    mean_d /= cf;
                    mean_dx /= cf;
                    for j in 0..c {
                        let d = g[r * c + j] * gam[j];
                        gx[r * c + j] += rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
                    }
                }
            });
        }
        Op::GatherRows { table, ids } => {
            let c = out.cols();
            accumulate(grads, nodes, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += g[r * c + j];
                    }
                }
            });
        }
        Op::Select { x, idx } => {
            let c = nodes[x.0].value.cols();
            accumulate(grads, nodes, *x, |gx| {
                for (k, &(i, j)) in idx.iter().enumerate() {
                    gx[i * c + j] += g[k];
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            let xv = nodes[x.0].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for j in 0..g.len() {
                    if xv[j] >= *lo && xv[j] <= *hi {
                        gx[j] += g[j];
                    }
                }
            });
        }
        Op::Abs { x } => {
            let xv = nodes[x.0].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for j in 0..g.len() {
                    let s = if xv[j] > 0.0 {
                        1.0
                    } else if xv[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gx[j] += g[j] * s;
                }
            });
        }
        Op::Log { x } => {
            let xv = nodes[x.0].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] / xv[j];
                }
            });
        }
        Op::Sum { x } => {
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
        }
        Op::Mean { x } => {
            let n = nodes[x.0].value.numel() as f64;
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
        }
        Op::Concat { parts, axis } => {
            let rank = out.rank();
            if rank == 1 || *axis == 0 {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    accumulate(grads, nodes, p, |gp| {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b)
                    });
                    off += n;
                }
            } else {
                let total = out.cols();
                let rows = out.rows();
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    accumulate(grads, nodes, p, |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
        }
        Op::Narrow { x, axis, start, len } => {
            let s = nodes[x.0].value.shape();
            if s.len() == 1 || *axis == 0 {
                let inner: usize = s[1..].iter().product();
                let off = start * inner;
                accumulate(grads, nodes, *x, |gx| {
                    gx[off..off + len * inner].iter_mut().zip(g).for_each(|(a, b)| *a += b)
                });
            } else {
                let (r, c) = (s[0], s[1]);
                accumulate(grads, nodes, *x, |gx| {
                    for i in 0..r {
                        for j in 0..*len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
        }
        Op::Reshape { x } => {
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
        }
        Op::Transpose { x } => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
    }
}
