use rand::Rng;

use super::{log_sum_exp, Tensor};
use crate::error::{NpaError, Result};

/// Handle to a node on a [`Graph`].
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
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    MeanAxis { input: Var, axis: usize },
    Sum(Var),
    MaskedFill { input: Var, mask: Vec<bool> },
    GatherRows { input: Var, indices: Vec<usize> },
    PickPerRow { input: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    RowMax { input: Var, argmax: Vec<usize> },
    MaskedRowMean { input: Var, steps: usize, visible: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for backpropagation. An op is recorded only when one of
/// its inputs requires grad; otherwise the result is stored as a constant.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reachable from it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
        if t.is_finite() {
            Ok(t)
        } else {
            Err(NpaError::invalid(format!("{op}: produced a non-finite value")))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NpaError::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NpaError::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NpaError::invalid("concat_cols: no inputs"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            let t = self.value(*p);
            t.require_matrix("concat_cols")?;
            if t.rows() != rows {
                return Err(NpaError::shape(
                    "concat_cols",
                    self.shape(*first),
                    t.shape(),
                ));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; the other
    /// entries get exactly zero weight. Every row needs one unmasked entry.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        t.require_matrix("softmax")?;
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(NpaError::shape("softmax", t.shape(), &[m.len()]));
            }
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row(r);
            let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NpaError::EmptyPrefix);
            }
            let mut z = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    data[r * cols + c] = e;
                    z += e;
                }
            }
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v /= z;
            }
        }
        let out = Self::finite("softmax", Tensor::new(t.shape().to_vec(), data)?)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&v| v <= 0.0) {
            return Err(NpaError::invalid("log: non-positive input"));
        }
        let out = Self::finite("log", t.map(f64::ln))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = Self::finite("exp", self.value(a).map(f64::exp))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    /// Mean over `axis` (0: rows collapse to `[1, c]`, 1: columns to `[r, 1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        t.require_matrix("mean_axis")?;
        let (rows, cols) = (t.rows(), t.cols());
        let out = match axis {
            0 => {
                let mut data = vec![0.0; cols];
                for r in 0..rows {
                    for (d, v) in data.iter_mut().zip(t.row(r)) {
                        *d += v;
                    }
                }
                data.iter_mut().for_each(|d| *d /= rows as f64);
                Tensor::new(vec![1, cols], data)?
            }
            1 => {
                let data = (0..rows)
                    .map(|r| t.row(r).iter().sum::<f64>() / cols as f64)
                    .collect();
                Tensor::new(vec![rows, 1], data)?
            }
            _ => return Err(NpaError::invalid(format!("mean_axis: bad axis {axis}"))),
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::MeanAxis { input: a, axis }, rg))
    }

    /// Row `t` of the output is the mean of the rows `j` of `a` with
    /// `visible[t * rows + j]`.
    /// Each column is summed in sorted order, so the result does not depend
    /// on the order of the rows.
    pub fn masked_row_mean(&mut self, a: Var, steps: usize, visible: &[bool]) -> Result<Var> {
        let t = self.value(a);
        t.require_matrix("masked_row_mean")?;
        let (rows, cols) = (t.rows(), t.cols());
        if visible.len() != steps * rows {
            return Err(NpaError::shape("masked_row_mean", t.shape(), &[steps, visible.len() / steps.max(1)]));
        }
        let mut data = vec![0.0; steps * cols];
        let mut column = Vec::with_capacity(rows);
        for s in 0..steps {
            let vis = &visible[s * rows..(s + 1) * rows];
            let n = vis.iter().filter(|&&v| v).count();
            if n == 0 {
                return Err(NpaError::EmptyPrefix);
            }
            for c in 0..cols {
                column.clear();
                column.extend((0..rows).filter(|&j| vis[j]).map(|j| t.data()[j * cols + c]));
                column.sort_by(f64::total_cmp);
                data[s * cols + c] = column.iter().sum::<f64>() / n as f64;
            }
        }
        let out = Tensor::new(vec![steps, cols], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out,
            Op::MaskedRowMean {
                input: a,
                steps,
                visible: visible.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    /// Replace entries where `mask` is true by `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(NpaError::shape("masked_fill", t.shape(), &[mask.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out,
            Op::MaskedFill {
                input: a,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Select rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        t.require_matrix("gather_rows")?;
        if indices.is_empty() {
            return Err(NpaError::invalid("gather_rows: no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            if i >= t.rows() {
                return Err(NpaError::invalid(format!(
                    "gather_rows: row {i} out of range for {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), t.cols()], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Entry `indices[r]` of each row `r`, as `[rows, 1]`.
    pub fn pick_per_row(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        t.require_matrix("pick_per_row")?;
        if indices.len() != t.rows() || indices.iter().any(|&i| i >= t.cols()) {
            return Err(NpaError::shape("pick_per_row", t.shape(), &[indices.len()]));
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| t.get(r, c))
            .collect();
        let out = Tensor::new(vec![indices.len(), 1], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out,
            Op::PickPerRow {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row negative log-likelihood `logsumexp(row) - row[target]`, as
    /// `[rows, 1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        t.require_matrix("cross_entropy")?;
        if targets.len() != t.rows() || targets.iter().any(|&i| i >= t.cols()) {
            return Err(NpaError::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let cols = t.cols();
        let mut probs = Vec::with_capacity(t.numel());
        let mut nll = Vec::with_capacity(t.rows());
        for (r, &target) in targets.iter().enumerate() {
            let row = t.row(r);
            let lse = log_sum_exp(row);
            nll.push(lse - row[target]);
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let probs = Tensor::new(vec![t.rows(), cols], probs)?;
        let out = Self::finite("cross_entropy", Tensor::new(vec![targets.len(), 1], nll)?)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row maximum as `[rows, 1]`; the gradient routes to the lowest-index
    /// maximizer.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        t.require_matrix("row_max")?;
        let argmax = t.row_argmax();
        let data = argmax.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let out = Tensor::new(vec![t.rows(), 1], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::RowMax { input: a, argmax }, rg))
    }

    /// Inverted dropout: zero each entry with probability `rate`, scale the
    /// survivors by `1 / (1 - rate)`. Identity at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(NpaError::invalid(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(a).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self.constant(Tensor::new(shape, mask)?);
        self.mul(a, mask)
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of nodes used more
    /// than once accumulate; previous results are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NpaError::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.item().is_finite() {
            return Err(NpaError::invalid("backward: loss is not finite"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul_nt(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).matmul_tn(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose()?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, *p, Tensor::new(vec![rows, cols], d)?);
                    }
                    offset += cols;
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Exp(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::MeanAxis { input, axis } => {
                let shape = self.shape(*input).to_vec();
                let (rows, cols) = (shape[0], shape[1]);
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] = if *axis == 0 {
                            g.data()[c] / rows as f64
                        } else {
                            g.data()[r] / cols as f64
                        };
                    }
                }
                self.accumulate(grads, *input, Tensor::new(shape, d)?);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.item()));
            }
            Op::MaskedFill { input, mask } => {
                let d = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { 0.0 } else { v })
                    .collect();
                self.accumulate(grads, *input, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::GatherRows { input, indices } => {
                let shape = self.shape(*input).to_vec();
                let cols = shape[1];
                let mut d = Tensor::zeros(&shape);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * cols..(i + 1) * cols];
                    for (x, y) in dst.iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::PickPerRow { input, indices } => {
                let shape = self.shape(*input).to_vec();
                let cols = shape[1];
                let mut d = Tensor::zeros(&shape);
                for (r, &c) in indices.iter().enumerate() {
                    d.data_mut()[r * cols + c] = g.data()[r];
                }
                self.accumulate(grads, *input, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = probs.cols();
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    let row = &mut d.data_mut()[r * cols..(r + 1) * cols];
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gr);
                }
                self.accumulate(grads, *logits, d);
            }
            Op::MaskedRowMean {
                input,
                steps,
                visible,
            } => {
                let shape = self.shape(*input).to_vec();
                let (rows, cols) = (shape[0], shape[1]);
                let mut d = Tensor::zeros(&shape);
                for s in 0..*steps {
                    let vis = &visible[s * rows..(s + 1) * rows];
                    let share = 1.0 / vis.iter().filter(|&&v| v).count() as f64;
                    for j in (0..rows).filter(|&j| vis[j]) {
                        let dst = &mut d.data_mut()[j * cols..(j + 1) * cols];
                        for (x, y) in dst.iter_mut().zip(g.row(s)) {
                            *x += y * share;
                        }
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::RowMax { input, argmax } => {
                let shape = self.shape(*input).to_vec();
                let cols = shape[1];
                let mut d = Tensor::zeros(&shape);
                for (r, &c) in argmax.iter().enumerate() {
                    d.data_mut()[r * cols + c] = g.data()[r];
                }
                self.accumulate(grads, *input, d);
            }
        }
        Ok(())
    }
}
