//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation appends a node holding its output value and
//! the indices of its inputs. Inputs always precede outputs, so the node list
//! is already a topological order and `backward` is a single reverse sweep.

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of recorded values.
///
/// `F32` rounds every leaf and every op output through `f32`, giving 32-bit
/// numerics on the same code path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn width_bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }

    fn round(self, t: &mut Tensor) {
        if self == Precision::F32 {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumSquares(x)
            | Op::LayerNorm { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// The computation record: an append-only list of executed operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients of a scalar loss, keyed by trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for frozen leaves and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`; later `Var`s become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    /// Whether gradients can flow from `v` back to a trainable leaf.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Inputs of node `v`, in argument order.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn leaf(&mut self, mut value: Tensor, trainable: bool) -> Var {
        self.precision.round(&mut value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn trainable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a fresh non-trainable leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, name: &'static str, mut value: Tensor, op: Op) -> Result<Var> {
        self.precision.round(&mut value);
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).as_matrix(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::dims(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
        )
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dims(
                "matmul_nt",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt(a, b),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).scale(c);
        self.push("scale", out, Op::Scale(x, c))
    }

    fn check_row_operand(&self, x: Var, r: Var, op: &'static str) -> Result<()> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.len() != xv.cols() || rv.rows() != 1 {
            return Err(Error::dims(op, xv.shape(), rv.shape()));
        }
        Ok(())
    }

    /// Adds a length-`n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row_operand(x, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        let n = r.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r[i % n];
        }
        self.push("add_row", out, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by a length-`n` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row_operand(x, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        let n = r.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= r[i % n];
        }
        self.push("mul_row", out, Op::MulRow(x, row))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        self.push("gelu", out, Op::Gelu(x))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push("layer_norm", out, Op::LayerNorm { x, inv_std })
    }

    /// Row-wise softmax. `mask[i*cols + j] == false` removes entry `j` from row `i`.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::dims("softmax mask", xv.shape(), &[m.len()]));
            }
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let mut out = xv.clone();
        for r in 0..rows {
            let base = r * cols;
            let row = &mut out.data_mut()[base..base + cols];
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(base + j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax row {r} fully masked")));
            }
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(base + j) {
                    (*v - max).exp()
                } else {
                    0.0
                };
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push("softmax", out, Op::Softmax(x))
    }

    /// Row gather: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = tv.as_matrix("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
            out.extend_from_slice(tv.row(id));
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("empty concat".into()))?;
        let cols = self.matrix(first, "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.matrix(x, "concat_rows")?;
            if c != cols {
                return Err(Error::dims(
                    "concat_rows",
                    self.value(first).shape(),
                    self.value(x).shape(),
                ));
            }
            data.extend_from_slice(self.value(x).data());
            rows += r;
        }
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(xs.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("empty concat".into()))?;
        let rows = self.matrix(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.matrix(x, "concat_cols")?;
            if r != rows {
                return Err(Error::dims(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(x).shape(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let xv = self.value(x).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&xv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(xs.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::dims(
                "slice_rows",
                self.value(x).shape(),
                &[start, len],
            ));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        self.push(
            "slice_rows",
            Tensor::from_parts(vec![len, cols], data),
            Op::SliceRows { x, start },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::dims(
                "slice_cols",
                self.value(x).shape(),
                &[start, len],
            ));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![rows, len], data),
            Op::SliceCols { x, start },
        )
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (l, v) = lv.as_matrix("softmax_cross_entropy")?;
        if targets.len() != l {
            return Err(Error::dims(
                "softmax_cross_entropy",
                lv.shape(),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Vocabulary { id: bad, size: v });
        }
        let mut probs = vec![0.0; l * v];
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[target];
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss / l as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.sum() / xv.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).squared_norm();
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares(x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        // Only trainable leaves keep their gradient; reached-or-not they get one.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.matrix(*a, "matmul")?;
                let n = out.cols();
                if self.needs(*a) {
                    let ga = kernels::matmul_nt(g.data(), self.value(*b).data(), m, n, k);
                    Self::accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.needs(*b) {
                    let gb = kernels::matmul_tn(self.value(*a).data(), g.data(), m, k, n);
                    Self::accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.matrix(*a, "matmul_nt")?;
                let n = out.cols();
                if self.needs(*a) {
                    let ga = kernels::matmul(g.data(), self.value(*b).data(), m, n, k);
                    Self::accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.needs(*b) {
                    let gb = kernels::matmul_tn(g.data(), self.value(*a).data(), m, n, k);
                    Self::accumulate(grads, *b, Tensor::from_parts(vec![n, k], gb));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.zip_with(self.value(*b), "mul", |x, y| x * y)?);
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.zip_with(self.value(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.scale(*c));
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.clone());
                }
                if self.needs(*row) {
                    let n = out.cols();
                    let mut gr = vec![0.0; n];
                    for (j, v) in g.data().iter().enumerate() {
                        gr[j % n] += v;
                    }
                    let shape = self.value(*row).shape().to_vec();
                    Self::accumulate(grads, *row, Tensor::from_parts(shape, gr));
                }
            }
            Op::MulRow(x, row) => {
                let n = out.cols();
                let r = self.value(*row).data();
                if self.needs(*x) {
                    let gx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * r[j % n])
                        .collect();
                    Self::accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
                }
                if self.needs(*row) {
                    let xv = self.value(*x).data();
                    let mut gr = vec![0.0; n];
                    for (j, (gv, xv)) in g.data().iter().zip(xv).enumerate() {
                        gr[j % n] += gv * xv;
                    }
                    let shape = self.value(*row).shape().to_vec();
                    Self::accumulate(grads, *row, Tensor::from_parts(shape, gr));
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let gx = g.zip_with(self.value(*x), "gelu", |gv, v| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    })?;
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if self.needs(*x) {
                    let cols = out.cols();
                    let mut gx = vec![0.0; out.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let y = out.row(r);
                        let gy = g.row(r);
                        let mean_g = gy.iter().sum::<f64>() / cols as f64;
                        let mean_gy =
                            gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            gx[r * cols + j] = is * (gy[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), gx));
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let cols = out.cols();
                    let mut gx = vec![0.0; out.len()];
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gy = g.row(r);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] = y[j] * (gy[j] - dot);
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), gx));
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut gt = vec![0.0; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, b) in gt[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    Self::accumulate(grads, *table, Tensor::from_parts(tv.shape().to_vec(), gt));
                }
            }
            Op::ConcatRows(xs) => {
                let cols = out.cols();
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if self.needs(x) {
                        let part = g.data()[offset..offset + n].to_vec();
                        Self::accumulate(grads, x, Tensor::from_parts(vec![n / cols, cols], part));
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    if self.needs(x) {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        Self::accumulate(grads, x, Tensor::from_parts(vec![rows, w], part));
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let mut gx = vec![0.0; xv.len()];
                    gx[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    Self::accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let w = out.cols();
                    let mut gx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        gx[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                    }
                    Self::accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.needs(*logits) {
                    let up = g.item();
                    let l = targets.len();
                    let v = probs.len() / l;
                    let scale = up / l as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * v + t] -= scale;
                    }
                    Self::accumulate(grads, *logits, Tensor::from_parts(vec![l, v], gl));
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    Self::accumulate(grads, *x, Tensor::full(&shape, g.item()));
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let shape = xv.shape().to_vec();
                    Self::accumulate(grads, *x, Tensor::full(&shape, g.item() / xv.len() as f64));
                }
            }
            Op::SumSquares(x) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, self.value(*x).scale(2.0 * g.item()));
                }
            }
        }
        Ok(())
    }
}
