use super::kernels::{self, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Gelu(Var),
    Softmax { input: Var, axis: usize },
    LogSumExp { input: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass recorded in topological order.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// [`Tape::backward`] walks the nodes once in reverse. A tape is built fresh
/// for every forward pass and owns all intermediate values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let len = shape[axis];
    if len == 0 {
        return Err(Error::Shape(format!("empty axis {axis} in shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
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
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are only accumulated for leaves with
    /// `requires_grad` and the nodes that depend on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Clears accumulated gradients so that backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a bias row (shape `[n]` or `[1, n]`) to every row of an m×n matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).numel() != n {
            return Err(Error::Shape(format!(
                "add_row: bias {:?} does not match {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(x, bias), rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| kernels::gelu(a)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = axis_extents(v.shape(), axis)?;
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for j in 0..inner {
                for i in 0..len {
                    buf[i] = src[(o * len + i) * inner + j];
                }
                kernels::softmax_in_place(&mut buf);
                for i in 0..len {
                    out[(o * len + i) * inner + j] = buf[i];
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { input: x, axis }, rg))
    }

    /// log Σ exp along `axis`; the axis is removed from the output shape.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = axis_extents(v.shape(), axis)?;
        let src = v.data();
        let mut out = vec![0.0; outer * inner];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for j in 0..inner {
                for i in 0..len {
                    buf[i] = src[(o * len + i) * inner + j];
                }
                out[o * inner + j] = kernels::logsumexp(&buf);
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSumExp { input: x, axis }, rg))
    }

    /// Normalizes each row over the last axis (population variance), then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let n = *v
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} must match last axis of {:?}",
                self.value(gain).shape(),
                self.value(bias).shape(),
                v.shape()
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = v.numel() / n;
        let mut out = vec![0.0; v.numel()];
        let mut xhat = vec![0.0; v.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &v.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..n {
                let h = (row[i] - mean) * is;
                xhat[r * n + i] = h;
                out[r * n + i] = h * g[i] + b[i];
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Mean over the batch of `logsumexp(row) - row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k) = self.dims2(logits)?;
        if targets.len() != b {
            return Err(Error::Shape(format!("cross_entropy: {} targets for {b} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target class {t} outside [0, {k})")));
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = v.row_slice(r);
            let lse = kernels::logsumexp(row);
            loss += lse - row[t];
            for i in 0..k {
                probs[r * k + i] = (row[i] - lse).exp();
            }
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > m {
            return Err(Error::Index(format!("row range {start}..{end} of {m}")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(end - start, n, data)?, Op::SliceRows { input: x, start }, rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > n {
            return Err(Error::Index(format!("column range {start}..{end} of {n}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, w, data)?, Op::SliceCols { input: x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let n = self.dims2(*first)?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = self.dims2(p)?;
            if c != n {
                return Err(Error::Shape(format!("concat_rows: {c} columns vs {n}")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, n, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let m = self.dims2(*first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(Error::Shape(format!("concat_cols: {r} rows vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Accumulates d`root`/d`v` into every reachable node that requires grad.
    ///
    /// `root` must be a one-element tensor on the gradient path. Running
    /// backward a second time without [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff("backward already ran on this tape; reset grads first".into()));
        }
        let node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Autodiff("root is not on this tape".into()))?;
        if node.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Autodiff("backward root does not depend on any gradient leaf".into()));
        }
        self.backward_done = true;
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                acc(*a, &mut |da| matmul_nt_acc(g, vb.data(), da, m, n, k));
                acc(*b, &mut |db| matmul_tn_acc(va.data(), g, db, m, k, n));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                let n = nodes[bias.0].value.numel();
                acc(*bias, &mut |d| {
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(vb) {
                        *dv += gv * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(va) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b * c));
            }
            Op::Transpose(x) => {
                let (m, n) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                acc(*x, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::Sum(x) => {
                let s = g[0];
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += s));
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for ((dv, gv), &a) in d.iter_mut().zip(g).zip(xv) {
                        *dv += gv * kernels::gelu_grad(a);
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis).expect("recorded shape");
                let y = out.data();
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| y[idx(i)] * g[idx(i)]).sum();
                            for i in 0..len {
                                d[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSumExp { input, axis } => {
                let xv = &nodes[input.0].value;
                let (outer, len, inner) = axis_extents(xv.shape(), *axis).expect("recorded shape");
                let (x, lse) = (xv.data(), out.data());
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let (l, gv) = (lse[o * inner + j], g[o * inner + j]);
                            for i in 0..len {
                                let idx = (o * len + i) * inner + j;
                                d[idx] += gv * (x[idx] - l).exp();
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = nodes[gain.0].value.data();
                let n = gv.len();
                let rows = inv_std.len();
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for i in 0..n {
                            let dh = gr[i] * gv[i];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[i];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for i in 0..n {
                            let dh = gr[i] * gv[i];
                            d[r * n + i] += inv_std[r] * (dh - mean_dh - hr[i] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for r in 0..rows {
                        for i in 0..n {
                            d[i] += g[r * n + i] * xhat[r * n + i];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for r in 0..rows {
                        for i in 0..n {
                            d[i] += g[r * n + i];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let b = targets.len();
                let k = probs.len() / b;
                let s = g[0] / b as f64;
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for i in 0..k {
                            let onehot = if i == t { 1.0 } else { 0.0 };
                            d[r * k + i] += s * (probs[r * k + i] - onehot);
                        }
                    }
                });
            }
            Op::SliceRows { input, start } => {
                let n = out.shape()[1];
                let off = start * n;
                acc(*input, &mut |d| {
                    d[off..off + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                });
            }
            Op::SliceCols { input, start } => {
                let (m, w) = (out.shape()[0], out.shape()[1]);
                let n = nodes[input.0].value.shape()[1];
                acc(*input, &mut |d| {
                    for r in 0..m {
                        for c in 0..w {
                            d[r * n + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |d| {
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                    });
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let (m, w) = (nodes[p.0].value.shape()[0], nodes[p.0].value.shape()[1]);
                    acc(p, &mut |d| {
                        for r in 0..m {
                            for c in 0..w {
                                d[r * w + c] += g[r * n + col + c];
                            }
                        }
                    });
                    col += w;
                }
            }
        }
    }
}
