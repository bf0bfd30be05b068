//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Each forward pass records its operations on a fresh [`Tape`]; node ids
//! are handed out in recording order, which is a topological order, and
//! [`Tape::backward`] visits nodes in exactly the reverse order. Gradient
//! accumulation order is therefore fixed by the recording order.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("{op}: empty segment")]
    EmptySegment { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward root does not depend on any differentiable input")]
    Detached,
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    /// Adds `d output / d inputs[k]` contracted with `grad_out` into
    /// `grad_inputs[k]` (each pre-sized like its input).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64], grad_inputs: &mut [Vec<f64>]);
}

pub type Index = Arc<[usize]>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    LogSumExp { x: Var, axis: usize },
    LogNormalizeRows(Var),
    SegmentSoftmax { x: Var, segments: Index },
    SegmentLogSoftmax { x: Var, segments: Index },
    SegmentSum { x: Var, segments: Index },
    GatherRows { x: Var, index: Index },
    ScaleRows { x: Var, scale: Var },
    Sum(Var),
    Mse(Var, Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddScalar(..) => "add_scalar",
            Op::Concat { .. } => "concat",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Exp(..) => "exp",
            Op::LogSumExp { .. } => "logsumexp",
            Op::LogNormalizeRows(..) => "log_normalize_rows",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::SegmentLogSoftmax { .. } => "segment_log_softmax",
            Op::SegmentSum { .. } => "segment_sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Sum(..) => "sum",
            Op::Mse(..) => "mse",
            Op::Custom { op, .. } => op.name(),
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape[0], shape[1], g.clone()),
            None => Tensor::zeros(shape[0], shape[1]),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(DiffError::ShapeMismatch { op, lhs: a.shape.clone(), rhs: b.shape.clone() });
    }
    Ok(())
}

/// Checks that segment ids are sorted and returns the `(start, end)` row
/// range of every run of equal ids.
fn segment_runs(op: &'static str, segments: &[usize], rows: usize) -> Result<Vec<(usize, usize)>> {
    if segments.len() != rows {
        return Err(DiffError::Invalid { op, message: format!("{} segment ids for {rows} rows", segments.len()) });
    }
    if rows == 0 {
        return Err(DiffError::EmptySegment { op });
    }
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=rows {
        if i == rows || segments[i] != segments[start] {
            if i < rows && segments[i] < segments[start] {
                return Err(DiffError::Invalid { op, message: "segment ids must be sorted ascending".into() });
            }
            runs.push((start, i));
            start = i;
        }
    }
    Ok(runs)
}

impl Tape {
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
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: av.shape.clone(), rhs: bv.shape.clone() });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av.values[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv.values[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aip * b;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(m, n, out), Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let values = av.values.iter().zip(&bv.values).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor { shape: av.shape.clone(), values };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `[1, n]` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(DiffError::ShapeMismatch { op: "add_row", lhs: av.shape.clone(), rhs: bv.shape.clone() });
        }
        let n = av.cols();
        let values = av.values.iter().enumerate().map(|(i, &x)| x + bv.values[i % n]).collect();
        let t = Tensor { shape: av.shape.clone(), values };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let t = Tensor { shape: av.shape.clone(), values: av.values.iter().map(|x| x * c).collect() };
        let rg = self.rg(a);
        self.push(t, Op::MulScalar(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let t = Tensor { shape: av.shape.clone(), values: av.values.iter().map(|x| x + c).collect() };
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// Concatenates along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(DiffError::Invalid { op: "concat", message: "no inputs".into() });
        }
        let first = self.value(parts[0]).shape.clone();
        let t = match axis {
            0 => {
                let mut values = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if pv.cols() != first[1] {
                        return Err(DiffError::ShapeMismatch { op: "concat", lhs: first, rhs: pv.shape.clone() });
                    }
                    rows += pv.rows();
                    values.extend_from_slice(&pv.values);
                }
                Tensor::new(rows, first[1], values)
            }
            1 => {
                let rows = first[0];
                let mut cols = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if pv.rows() != rows {
                        return Err(DiffError::ShapeMismatch { op: "concat", lhs: first, rhs: pv.shape.clone() });
                    }
                    cols += pv.cols();
                }
                let mut values = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        values.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::new(rows, cols, values)
            }
            _ => return Err(DiffError::Invalid { op: "concat", message: format!("axis {axis} out of range") }),
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let t = Tensor { shape: av.shape.clone(), values: av.values.iter().map(|&x| f(x)).collect() };
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, move |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    /// Log-sum-exp over columns of each row (`axis = 1`, result `[m, 1]`) or
    /// over rows of each column (`axis = 0`, result `[1, n]`).
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let t = match axis {
            1 => Tensor::new(m, 1, (0..m).map(|r| crate::math::log_sum_exp(av.row_slice(r))).collect()),
            0 => {
                let mut col = vec![0.0; m];
                let values = (0..n)
                    .map(|c| {
                        for (r, x) in col.iter_mut().enumerate() {
                            *x = av.get(r, c);
                        }
                        crate::math::log_sum_exp(&col)
                    })
                    .collect();
                Tensor::new(1, n, values)
            }
            _ => return Err(DiffError::Invalid { op: "logsumexp", message: format!("axis {axis} out of range") }),
        };
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSumExp { x: a, axis }, rg))
    }

    /// Subtracts each row's log-sum-exp from the row.
    pub fn log_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut values = av.values.clone();
        for row in values.chunks_exact_mut(n.max(1)) {
            let z = crate::math::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= z);
        }
        let t = Tensor { shape: av.shape.clone(), values };
        let rg = self.rg(a);
        self.push(t, Op::LogNormalizeRows(a), rg)
    }

    /// Softmax over the rows of each segment, independently per column.
    /// `segments[r]` is the (ascending) segment id of row `r`.
    pub fn segment_softmax(&mut self, x: Var, segments: &Index) -> Result<Var> {
        let xv = self.value(x);
        let runs = segment_runs("segment_softmax", segments, xv.rows())?;
        let d = xv.cols();
        let mut values = xv.values.clone();
        for &(s, e) in &runs {
            for c in 0..d {
                let max = (s..e).map(|r| values[r * d + c]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in s..e {
                    let v = (values[r * d + c] - max).exp();
                    values[r * d + c] = v;
                    z += v;
                }
                for r in s..e {
                    values[r * d + c] /= z;
                }
            }
        }
        let t = Tensor { shape: xv.shape.clone(), values };
        let rg = self.rg(x);
        Ok(self.push(t, Op::SegmentSoftmax { x, segments: segments.clone() }, rg))
    }

    /// `x - logsumexp` within each segment, per column.
    pub fn segment_log_softmax(&mut self, x: Var, segments: &Index) -> Result<Var> {
        let xv = self.value(x);
        let runs = segment_runs("segment_log_softmax", segments, xv.rows())?;
        let d = xv.cols();
        let mut values = xv.values.clone();
        let mut buf = Vec::new();
        for &(s, e) in &runs {
            for c in 0..d {
                buf.clear();
                buf.extend((s..e).map(|r| values[r * d + c]));
                let z = crate::math::log_sum_exp(&buf);
                for r in s..e {
                    values[r * d + c] -= z;
                }
            }
        }
        let t = Tensor { shape: xv.shape.clone(), values };
        let rg = self.rg(x);
        Ok(self.push(t, Op::SegmentLogSoftmax { x, segments: segments.clone() }, rg))
    }

    /// Sums rows into `n_segments` output rows; empty segments give zeros.
    pub fn segment_sum(&mut self, x: Var, segments: &Index, n_segments: usize) -> Result<Var> {
        let xv = self.value(x);
        if segments.len() != xv.rows() {
            return Err(DiffError::Invalid {
                op: "segment_sum",
                message: format!("{} segment ids for {} rows", segments.len(), xv.rows()),
            });
        }
        let d = xv.cols();
        let mut values = vec![0.0; n_segments * d];
        for (r, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(DiffError::Invalid { op: "segment_sum", message: format!("segment {s} >= {n_segments}") });
            }
            for c in 0..d {
                values[s * d + c] += xv.values[r * d + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(n_segments, d, values), Op::SegmentSum { x, segments: segments.clone() }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, index: &Index) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut values = Vec::with_capacity(index.len() * d);
        for &i in index.iter() {
            if i >= xv.rows() {
                return Err(DiffError::Invalid { op: "gather_rows", message: format!("row {i} >= {}", xv.rows()) });
            }
            values.extend_from_slice(xv.row_slice(i));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(index.len(), d, values), Op::GatherRows { x, index: index.clone() }, rg))
    }

    /// Multiplies row `r` of `x` by `scale[r, 0]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(scale));
        if sv.cols() != 1 || sv.rows() != xv.rows() {
            return Err(DiffError::ShapeMismatch { op: "scale_rows", lhs: xv.shape.clone(), rhs: sv.shape.clone() });
        }
        let d = xv.cols();
        let values = xv.values.iter().enumerate().map(|(i, &v)| v * sv.values[i / d.max(1)]).collect();
        let t = Tensor { shape: xv.shape.clone(), values };
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(t, Op::ScaleRows { x, scale }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean squared error.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        same_shape("mse", pv, tv)?;
        if pv.is_empty() {
            return Err(DiffError::Invalid { op: "mse", message: "empty input".into() });
        }
        let n = pv.len() as f64;
        let s = pv.values.iter().zip(&tv.values).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), rg))
    }

    /// Records a fused operation whose forward value was computed by the
    /// caller.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom { inputs, op }, rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(DiffError::NotScalar(rv.shape.clone()));
        }
        if !self.rg(root) {
            return Err(DiffError::Detached);
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect() })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv.values[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av.values[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, gi)| *x -= gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv.values[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av.values[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = y.cols();
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
                acc(*b, &mut |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                });
            }
            Op::MulScalar(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi)),
            Op::AddScalar(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi)),
            Op::Concat { parts, axis } => {
                let (rows, cols) = (y.rows(), y.cols());
                let mut offset = 0;
                for &p in parts {
                    let pv = &nodes[p.0].value;
                    let (pr, pc) = (pv.rows(), pv.cols());
                    acc(p, &mut |gp| {
                        if *axis == 0 {
                            for (i, x) in gp.iter_mut().enumerate() {
                                *x += g[offset * cols + i];
                            }
                        } else {
                            for r in 0..rows {
                                for c in 0..pc {
                                    gp[r * pc + c] += g[r * cols + offset + c];
                                }
                            }
                        }
                    });
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av.values[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += if av.values[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y.values[i];
                }
            }),
            Op::LogSumExp { x, axis } => {
                let xv = &nodes[x.0].value;
                let (m, n) = (xv.rows(), xv.cols());
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        for c in 0..n {
                            let (out, go) = if *axis == 1 { (y.values[r], g[r]) } else { (y.values[c], g[c]) };
                            gx[r * n + c] += go * (xv.values[r * n + c] - out).exp();
                        }
                    }
                });
            }
            Op::LogNormalizeRows(a) => {
                let n = y.cols();
                acc(*a, &mut |ga| {
                    for r in 0..y.rows() {
                        let gs: f64 = g[r * n..(r + 1) * n].iter().sum();
                        for c in 0..n {
                            ga[r * n + c] += g[r * n + c] - y.values[r * n + c].exp() * gs;
                        }
                    }
                });
            }
            Op::SegmentSoftmax { x, segments } => {
                let d = y.cols();
                let runs = segment_runs("segment_softmax", segments, y.rows()).expect("validated in forward");
                acc(*x, &mut |gx| {
                    for &(s, e) in &runs {
                        for c in 0..d {
                            let dot: f64 = (s..e).map(|r| g[r * d + c] * y.values[r * d + c]).sum();
                            for r in s..e {
                                gx[r * d + c] += y.values[r * d + c] * (g[r * d + c] - dot);
                            }
                        }
                    }
                });
            }
            Op::SegmentLogSoftmax { x, segments } => {
                let d = y.cols();
                let runs = segment_runs("segment_log_softmax", segments, y.rows()).expect("validated in forward");
                acc(*x, &mut |gx| {
                    for &(s, e) in &runs {
                        for c in 0..d {
                            let gs: f64 = (s..e).map(|r| g[r * d + c]).sum();
                            for r in s..e {
                                gx[r * d + c] += g[r * d + c] - y.values[r * d + c].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::SegmentSum { x, segments } => {
                let d = y.cols();
                acc(*x, &mut |gx| {
                    for (r, &s) in segments.iter().enumerate() {
                        for c in 0..d {
                            gx[r * d + c] += g[s * d + c];
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let d = y.cols();
                acc(*x, &mut |gx| {
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..d {
                            gx[i * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::ScaleRows { x, scale } => {
                let (xv, sv) = (&nodes[x.0].value, &nodes[scale.0].value);
                let d = xv.cols();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sv.values[i / d];
                    }
                });
                acc(*scale, &mut |gs| {
                    for (i, gi) in g.iter().enumerate() {
                        gs[i / d] += gi * xv.values[i];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mse(p, t) => {
                let (pv, tv) = (&nodes[p.0].value, &nodes[t.0].value);
                let scale = 2.0 * g[0] / pv.len() as f64;
                acc(*p, &mut |gp| {
                    for ((g, p), t) in gp.iter_mut().zip(&pv.values).zip(&tv.values) {
                        *g += scale * (p - t);
                    }
                });
                acc(*t, &mut |gt| {
                    for ((g, p), t) in gt.iter_mut().zip(&pv.values).zip(&tv.values) {
                        *g -= scale * (p - t);
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let mut gin: Vec<Vec<f64>> = ins.iter().map(|t| vec![0.0; t.len()]).collect();
                op.backward(&ins, y, g, &mut gin);
                for (v, gv) in inputs.iter().zip(gin) {
                    acc(*v, &mut |slot| slot.iter_mut().zip(&gv).for_each(|(x, gi)| *x += gi));
                }
            }
        }
    }
}
