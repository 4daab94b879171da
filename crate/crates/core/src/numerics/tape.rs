//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs. `backward` walks the nodes in exact reverse order, so a node's
//! gradient is complete (all consumers have contributed) before it is pushed
//! to its own inputs. Nodes that do not depend on any `requires_grad` leaf are
//! skipped entirely.

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, tap_range};
use super::tensor::Tensor;
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    Normalize { x: Var, rstd: Vec<f64> },
    Conv1d { x: Var, kernel: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    SegmentMean { x: Var, lengths: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanAbsDiff(Var, Var),
    MeanSqDiff(Var, Var),
    MaskedMeanSqDiff { a: Var, b: Var, mask: Vec<bool>, count: usize },
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient populated by the last `backward`, if `v` is an ancestor of the
    /// loss that requires gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|i| self.nodes[i.0].value.requires_grad());
        value.set_requires_grad(rg);
        value.clear_grad();
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor; keeps its `requires_grad` flag.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.clear_grad();
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.set_requires_grad(false);
        self.leaf(value)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_operand(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let cols = self.value(x).cols();
        if self.value(r).numel() != cols {
            return Err(Error::shape(
                op,
                format!("row operand {:?} does not match {:?}", self.value(r).shape(), self.value(x).shape()),
            ));
        }
        Ok(cols)
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let c = self.row_operand("add_row", x, r)?;
        let row = self.value(r).data();
        let vx = self.value(x);
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + row[i % c]).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, r), &[x, r]))
    }

    /// Multiplies every row of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let c = self.row_operand("mul_row", x, r)?;
        let row = self.value(r).data();
        let vx = self.value(x);
        let data = vx.data().iter().enumerate().map(|(i, &v)| v * row[i % c]).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulRow(x, r), &[x, r]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Relu(x), &[x])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(shape, axis);
        let src = vx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Per-row standardization over the last axis: `(x - mean) / sqrt(var + eps)`.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Config(format!("layer norm eps must be positive, got {eps}")));
        }
        let vx = self.value(x);
        let (rows, c) = (vx.rows(), vx.cols());
        let src = vx.data();
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Normalize { x, rstd }, &[x]))
    }

    /// Layer normalization with affine parameters `gamma` (scale) and `beta` (shift).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.normalize(x, eps)?;
        let scaled = self.mul_row(n, gamma)?;
        self.add_row(scaled, beta)
    }

    /// Same-padded 1-D convolution over time. `x` is `[T×d_in]`, `kernel` is
    /// `[k×d_in×d_out]` with `k` odd; borders are zero-filled.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t_len, d_in) = dims2(self.value(x), "conv1d")?;
        let (k, d_out) = match self.value(kernel).shape() {
            [k, i, o] if *i == d_in => (*k, *o),
            s => {
                return Err(Error::shape(
                    "conv1d",
                    format!("kernel shape {s:?} incompatible with input {:?}", self.value(x).shape()),
                ))
            }
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        let pad = (k / 2) as isize;
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let mut out = vec![0.0; t_len * d_out];
        for j in 0..k {
            let offset = j as isize - pad;
            if let Some((t0, t1)) = tap_range(t_len, offset) {
                let s0 = (t0 as isize + offset) as usize;
                let src = &xs[s0 * d_in..(s0 + t1 - t0) * d_in];
                let w = &ks[j * d_in * d_out..(j + 1) * d_in * d_out];
                gemm_nn(src, w, t1 - t0, d_in, d_out, &mut out[t0 * d_out..t1 * d_out]);
            }
        }
        let t = Tensor::matrix(t_len, d_out, out)?;
        Ok(self.push(t, Op::Conv1d { x, kernel }, &[x, kernel]))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("range {start}..{end} outside {c} columns")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::matrix(r, w, out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no operands"))?;
        let (r, _) = dims2(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts differ: {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(r, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Output row `i` is row `index[i]` of `x`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "gather_rows")?;
        if index.is_empty() {
            return Err(Error::EmptyOutput);
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {r} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(index.len(), c, out)?;
        Ok(self.push(t, Op::GatherRows { x, index: index.to_vec() }, &[x]))
    }

    /// Mean of consecutive row spans; a zero-length span yields a zero row.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "segment_mean")?;
        let total: usize = lengths.iter().sum();
        if total != r || lengths.is_empty() {
            return Err(Error::Alignment(format!("spans cover {total} rows, input has {r}")));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; lengths.len() * c];
        let mut start = 0;
        for (s, &len) in lengths.iter().enumerate() {
            let dst = &mut out[s * c..(s + 1) * c];
            for row in start..start + len {
                for (o, v) in dst.iter_mut().zip(&src[row * c..(row + 1) * c]) {
                    *o += v;
                }
            }
            if len > 0 {
                dst.iter_mut().for_each(|o| *o /= len as f64);
            }
            start += len;
        }
        let t = Tensor::matrix(lengths.len(), c, out)?;
        Ok(self.push(t, Op::SegmentMean { x, lengths: lengths.to_vec() }, &[x]))
    }

    /// Mean over rows, as a `[1×C]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rows();
        self.segment_mean(x, &[r])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean absolute difference of two equally shaped tensors.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_abs_diff", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s = va.iter().zip(vb).map(|(x, y)| (x - y).abs()).sum::<f64>() / va.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::MeanAbsDiff(a, b), &[a, b]))
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_sq_diff", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::MeanSqDiff(a, b), &[a, b]))
    }

    /// Mean squared difference over the rows with `mask[row] == true`.
    /// Gradient flows into `a` only; `b` is treated as a fixed target.
    pub fn masked_mean_sq_diff(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape("masked_mean_sq_diff", a, b)?;
        let (rows, c) = (self.value(a).rows(), self.value(a).cols());
        if mask.len() != rows {
            return Err(Error::shape("masked_mean_sq_diff", format!("mask of {} for {rows} rows", mask.len())));
        }
        let kept = mask.iter().filter(|&&m| m).count();
        if kept == 0 {
            return Err(Error::Contract("mean over a fully masked batch is undefined".into()));
        }
        let count = kept * c;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut s = 0.0;
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for i in r * c..(r + 1) * c {
                let d = va[i] - vb[i];
                s += d * d;
            }
        }
        let t = Tensor::scalar(s / count as f64);
        Ok(self.push(t, Op::MaskedMeanSqDiff { a, b, mask: mask.to_vec(), count }, &[a]))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let vx = self.value(x);
        let mask: Vec<f64> =
            (0..vx.numel()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Populates `grad` on every node that requires gradients and is an
    /// ancestor of `loss`. Previous gradients on the tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            self.backprop_node(i, g, lower);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                node.value.set_grad(g).expect("gradient matches value shape");
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].value.requires_grad();
        // Accumulates into the gradient buffer of `v`, allocating it lazily.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    gemm_nt(g, val(*b).data(), m, n, k, acc!(*a));
                }
                if wants(*b) {
                    gemm_tn(val(*a).data(), g, m, k, n, acc!(*b));
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let dst = acc!(*a);
                    for p in 0..r {
                        for q in 0..c {
                            dst[p * c + q] += g[q * r + p];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    acc!(*a).iter_mut().zip(g).zip(other).for_each(|((d, g), o)| *d += g * o);
                }
                if wants(*b) {
                    let other = val(*a).data();
                    acc!(*b).iter_mut().zip(g).zip(other).for_each(|((d, g), o)| *d += g * o);
                }
            }
            Op::AddRow(x, r) => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if wants(*r) {
                    let c = val(*r).numel();
                    let dst = acc!(*r);
                    for (idx, gv) in g.iter().enumerate() {
                        dst[idx % c] += gv;
                    }
                }
            }
            Op::MulRow(x, r) => {
                let c = val(*r).numel();
                if wants(*x) {
                    let row = val(*r).data();
                    let dst = acc!(*x);
                    for (idx, gv) in g.iter().enumerate() {
                        dst[idx] += gv * row[idx % c];
                    }
                }
                if wants(*r) {
                    let xs = val(*x).data();
                    let dst = acc!(*r);
                    for (idx, gv) in g.iter().enumerate() {
                        dst[idx % c] += gv * xs[idx];
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xs = val(*x).data();
                    acc!(*x).iter_mut().zip(g).zip(xs).for_each(|((d, g), v)| {
                        if *v > 0.0 {
                            *d += g
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
                    let dst = acc!(*x);
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + q;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                dst[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Normalize { x, rstd } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let c = val(*x).cols();
                    let dst = acc!(*x);
                    for (r, s) in rstd.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                        let mean_g = gr.iter().sum::<f64>() / c as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((d, gv), yv) in dst[span].iter_mut().zip(gr).zip(yr) {
                            *d += s * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
            }
            Op::Conv1d { x, kernel } => {
                let (t_len, d_in) = (val(*x).shape()[0], val(*x).shape()[1]);
                let (k, d_out) = (val(*kernel).shape()[0], val(*kernel).shape()[2]);
                let pad = (k / 2) as isize;
                let xs = val(*x).data();
                let ks = val(*kernel).data();
                if wants(*x) {
                    let dst = acc!(*x);
                    for j in 0..k {
                        let offset = j as isize - pad;
                        if let Some((t0, t1)) = tap_range(t_len, offset) {
                            let s0 = (t0 as isize + offset) as usize;
                            let w = &ks[j * d_in * d_out..(j + 1) * d_in * d_out];
                            gemm_nt(
                                &g[t0 * d_out..t1 * d_out],
                                w,
                                t1 - t0,
                                d_out,
                                d_in,
                                &mut dst[s0 * d_in..(s0 + t1 - t0) * d_in],
                            );
                        }
                    }
                }
                if wants(*kernel) {
                    let dst = acc!(*kernel);
                    for j in 0..k {
                        let offset = j as isize - pad;
                        if let Some((t0, t1)) = tap_range(t_len, offset) {
                            let s0 = (t0 as isize + offset) as usize;
                            gemm_tn(
                                &xs[s0 * d_in..(s0 + t1 - t0) * d_in],
                                &g[t0 * d_out..t1 * d_out],
                                t1 - t0,
                                d_in,
                                d_out,
                                &mut dst[j * d_in * d_out..(j + 1) * d_in * d_out],
                            );
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let w = nodes[i].value.cols();
                    let dst = acc!(*x);
                    for (r, gr) in g.chunks(w).enumerate() {
                        for (d, gv) in dst[r * c + start..r * c + start + w].iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let dst = acc!(p);
                        for (r, gr) in g.chunks(total).enumerate() {
                            for (d, gv) in dst[r * w..(r + 1) * w].iter_mut().zip(&gr[offset..offset + w]) {
                                *d += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, index } => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let dst = acc!(*x);
                    for (r, &src) in index.iter().enumerate() {
                        for (d, gv) in dst[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SegmentMean { x, lengths } => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let dst = acc!(*x);
                    let mut start = 0;
                    for (s, &len) in lengths.iter().enumerate() {
                        let gs = &g[s * c..(s + 1) * c];
                        for row in start..start + len {
                            for (d, gv) in dst[row * c..(row + 1) * c].iter_mut().zip(gs) {
                                *d += gv / len as f64;
                            }
                        }
                        start += len;
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc!(*x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).numel() as f64;
                    acc!(*x).iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let n = val(*a).numel() as f64;
                let (va, vb) = (val(*a).data(), val(*b).data());
                let sign = |p: usize| {
                    let d = va[p] - vb[p];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if wants(*a) {
                    acc!(*a).iter_mut().enumerate().for_each(|(p, d)| *d += g[0] * sign(p) / n);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().enumerate().for_each(|(p, d)| *d -= g[0] * sign(p) / n);
                }
            }
            Op::MeanSqDiff(a, b) => {
                let n = val(*a).numel() as f64;
                let (va, vb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc!(*a).iter_mut().enumerate().for_each(|(p, d)| *d += g[0] * 2.0 * (va[p] - vb[p]) / n);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().enumerate().for_each(|(p, d)| *d -= g[0] * 2.0 * (va[p] - vb[p]) / n);
                }
            }
            Op::MaskedMeanSqDiff { a, b, mask, count } => {
                if wants(*a) {
                    let c = val(*a).cols();
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    let dst = acc!(*a);
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for p in r * c..(r + 1) * c {
                            dst[p] += g[0] * 2.0 * (va[p] - vb[p]) / *count as f64;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).zip(mask).for_each(|((d, g), m)| *d += g * m);
                }
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
