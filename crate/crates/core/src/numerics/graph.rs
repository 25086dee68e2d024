//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated; nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.
//! Parameters are borrowed from the caller's tensor slice rather than
//! copied, which keeps building one graph per utterance cheap.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{
    layer_norm_row, log_softmax, matmul_kernel, matmul_t_kernel, softmax_in_place,
    t_matmul_kernel,
};
use super::tensor::{check_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Param(usize),
    Const,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MaskFill {
        x: Var,
        filled: Vec<bool>,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    MeanRows(Var),
    Sum(Var),
    SmoothedCe {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
    },
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the borrowed slice.
    value: Option<Tensor>,
}

/// A recorded computation over borrowed parameters.
pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            dropout_rng: None,
        }
    }

    /// Training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(params: &'p [Tensor], seed: u64) -> Self {
        let mut g = Self::new(params);
        g.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params[*i],
            (None, _) => unreachable!("only parameter leaves borrow their value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, context: &str) -> Result<Var> {
        check_finite(value.data(), context)?;
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf for parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize) -> Result<Var> {
        if index >= self.params.len() {
            return Err(Error::OutOfRange {
                what: "parameter index",
                value: index,
                limit: self.params.len(),
            });
        }
        if let Some(v) = self.param_vars[index] {
            return Ok(v);
        }
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        Ok(v)
    }

    /// Leaf holding a fixed input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Const,
            value: Some(t),
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// `a[m×k] · b[k×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_kernel(ta.data(), tb.data(), m, k, p);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, p], out), "matmul")
    }

    /// `a[m×k] · b[p×k]ᵀ`, the row-wise form of `W × x`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(self.shape_err("matmul_t", a, b));
        }
        let (m, k, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let out = matmul_t_kernel(ta.data(), tb.data(), m, k, p);
        self.push(Op::MatMulT(a, b), Tensor::from_parts(vec![m, p], out), "matmul_t")
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, out), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `bias[k]` to every row of `a[m×k]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let k = ta.cols();
        if tb.numel() != k {
            return Err(self.shape_err("add_row", a, bias));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(k.max(1)) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Op::AddRow(a, bias), Tensor::from_parts(shape, out), "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|v| v * c).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Scale(a, c), Tensor::from_parts(shape, out), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Relu(a), Tensor::from_parts(shape, out), "relu")
    }

    /// Softmax over the last axis of a matrix (each row sums to one).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let k = ta.cols();
        if k == 0 {
            return Err(Error::invalid("softmax over an empty axis"));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let shape = ta.shape().to_vec();
        self.push(Op::SoftmaxRows(a), Tensor::from_parts(shape, out), "softmax")
    }

    /// Row-wise layer normalization with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d < 2 {
            return Err(Error::invalid("layer_norm needs at least two features"));
        }
        if tg.numel() != d || tb.numel() != d {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            inv_std[r] = layer_norm_row(
                tx.row(r),
                tg.data(),
                tb.data(),
                eps,
                &mut out[r * d..(r + 1) * d],
                &mut xhat[r * d..(r + 1) * d],
            );
        }
        let shape = tx.shape().to_vec();
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Tensor::from_parts(shape, out),
            "layer_norm",
        )
    }

    /// Gathers rows `ids` of `table[V×d]` into an `ids.len() × d` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange {
                    what: "token id",
                    value: id,
                    limit: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor::from_parts(vec![ids.len(), d], out),
            "embedding",
        )
    }

    /// Concatenates matrices with equal row counts side by side, in order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rank() != 2 || self.value(p).rows() != rows {
                return Err(self.shape_err("concat", first, p));
            }
            total += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::from_parts(vec![rows, total], out),
            "concat",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.rows() {
            return Err(Error::OutOfRange {
                what: "row slice end",
                value: start + len,
                limit: tx.rows(),
            });
        }
        let c = tx.cols();
        let out = tx.data()[start * c..(start + len) * c].to_vec();
        self.push(
            Op::SliceRows { x, start },
            Tensor::from_parts(vec![len, c], out),
            "slice_rows",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.cols() {
            return Err(Error::OutOfRange {
                what: "column slice end",
                value: start + len,
                limit: tx.cols(),
            });
        }
        let rows = tx.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        self.push(
            Op::SliceCols { x, start },
            Tensor::from_parts(vec![rows, len], out),
            "slice_cols",
        )
    }

    /// Replaces every element where `filled` is true with `value`; those
    /// positions receive no gradient.
    pub fn mask_fill(&mut self, x: Var, filled: &[bool], value: f64) -> Result<Var> {
        let tx = self.value(x);
        if filled.len() != tx.numel() {
            return Err(Error::Shape {
                op: "mask_fill",
                lhs: tx.shape().to_vec(),
                rhs: vec![filled.len()],
            });
        }
        let out = tx
            .data()
            .iter()
            .zip(filled)
            .map(|(&v, &f)| if f { value } else { v })
            .collect();
        let shape = tx.shape().to_vec();
        self.push(
            Op::MaskFill {
                x,
                filled: filled.to_vec(),
            },
            Tensor::from_parts(shape, out),
            "mask_fill",
        )
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and the survivors are divided by `1 − rate`. In
    /// evaluation mode, or at rate 0, this returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.dropout_rng.is_none() || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.value(x).numel();
        let rng = self.dropout_rng.as_mut().expect("training graph");
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let tx = self.value(x);
        let out = tx.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let shape = tx.shape().to_vec();
        self.push(Op::Dropout { x, scale }, Tensor::from_parts(shape, out), "dropout")
    }

    /// Column means of `x[m×k]`, as a `1×k` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, k) = (tx.rows(), tx.cols());
        if m == 0 {
            return Err(Error::invalid("mean over zero rows"));
        }
        let mut out = vec![0.0; k];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        self.push(Op::MeanRows(x), Tensor::from_parts(vec![1, k], out), "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::from_parts(vec![], vec![s]), "sum")
    }

    /// Mean over rows of the label-smoothed cross-entropy between
    /// `softmax(logits[r])` and the smoothed one-hot of `targets[r]`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let rows = tl.rows();
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid("label smoothing outside [0, 1)"));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total += smoothed_ce_row(tl.row(r), t, smoothing)?;
        }
        self.push(
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                smoothing,
            },
            Tensor::from_parts(vec![], vec![total / rows as f64]),
            "cross_entropy",
        )
    }

    /// Reverse sweep from the scalar `loss`, returning gradients for every
    /// leaf (parameters and constants) the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(_) | Op::Const => {
                    let shape = self.value(Var(i)).shape().to_vec();
                    leaves[i] = Some(Tensor::from_parts(shape, g));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    accumulate(&mut grads, *a, matmul_t_kernel(&g, tb.data(), m, p, k));
                    accumulate(&mut grads, *b, t_matmul_kernel(ta.data(), &g, m, k, p));
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                    accumulate(&mut grads, *a, matmul_kernel(&g, tb.data(), m, p, k));
                    accumulate(&mut grads, *b, t_matmul_kernel(&g, ta.data(), m, p, k));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let k = self.value(*bias).numel();
                    let mut gb = vec![0.0; k];
                    for row in g.chunks(k.max(1)) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * c).collect());
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let ga = g
                        .iter()
                        .zip(ta.data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("computed node");
                    let k = y.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(k).zip(y.data().chunks(k)).zip(ga.chunks_mut(k)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            out[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let tg = self.value(*gain);
                    let d = tg.numel();
                    let mut gx = vec![0.0; g.len()];
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            ggain[j] += gr[j] * xr[j];
                            gbias[j] += gr[j];
                            dxhat[j] = gr[j] * tg.data()[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = istd * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let mut gt = vec![0.0; tt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::ConcatCols(parts) => {
                    let rows = self.value(parts[0]).rows();
                    let total: usize = g.len() / rows.max(1);
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += c;
                    }
                }
                Op::SliceRows { x, start } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut gx = vec![0.0; tx.numel()];
                    gx[start * c..start * c + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let (rows, c) = (tx.rows(), tx.cols());
                    let len = g.len() / rows.max(1);
                    let mut gx = vec![0.0; tx.numel()];
                    for r in 0..rows {
                        gx[r * c + start..r * c + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaskFill { x, filled } => {
                    let gx = g
                        .iter()
                        .zip(filled)
                        .map(|(&v, &f)| if f { 0.0 } else { v })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dropout { x, scale } => {
                    let gx = g.iter().zip(scale).map(|(a, b)| a * b).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanRows(x) => {
                    let tx = self.value(*x);
                    let m = tx.rows();
                    let mut gx = Vec::with_capacity(tx.numel());
                    for _ in 0..m {
                        gx.extend(g.iter().map(|v| v / m as f64));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::SmoothedCe {
                    logits,
                    targets,
                    smoothing,
                } => {
                    let tl = self.value(*logits);
                    let c = tl.cols();
                    let rows = targets.len() as f64;
                    let mut gl = Vec::with_capacity(tl.numel());
                    for (r, &t) in targets.iter().enumerate() {
                        let mut p = tl.row(r).to_vec();
                        softmax_in_place(&mut p);
                        let (q_on, q_off) = smoothed_targets(c, *smoothing);
                        for (j, pj) in p.iter().enumerate() {
                            let q = if j == t { q_on } else { q_off };
                            gl.push(g[0] * (pj - q) / rows);
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }

        let mut params = vec![None; self.params.len()];
        for (idx, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                params[idx] = leaves[v.0].take();
            }
        }
        Ok(Gradients {
            params,
            leaves,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Target probabilities `(on, off)` of label smoothing over `classes`.
pub(crate) fn smoothed_targets(classes: usize, smoothing: f64) -> (f64, f64) {
    let off = smoothing / classes as f64;
    (1.0 - smoothing + off, off)
}

/// Label-smoothed cross-entropy of one logit row.
pub(crate) fn smoothed_ce_row(logits: &[f64], target: usize, smoothing: f64) -> Result<f64> {
    let c = logits.len();
    if target >= c {
        return Err(Error::OutOfRange {
            what: "target class",
            value: target,
            limit: c,
        });
    }
    let logp = log_softmax(logits);
    let (on, off) = smoothed_targets(c, smoothing);
    let mut loss = 0.0;
    for (j, lp) in logp.iter().enumerate() {
        let q = if j == target { on } else { off };
        if q > 0.0 {
            loss -= q * lp;
        }
    }
    Ok(loss)
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of parameter `index`, or `None` if the loss does not
    /// depend on it.
    pub fn param(&self, index: usize) -> Option<&Tensor> {
        self.params.get(index).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a constant leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// One gradient per parameter, zero-filled for parameters off the loss path.
    pub fn into_param_grads(self, params: &[Tensor]) -> Vec<Tensor> {
        self.params
            .into_iter()
            .zip(params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let params = [Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.5]).unwrap()];
        let mut g = Graph::new(&params);
        let w = g.param(0).unwrap();
        let loss = g.sum(w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(0).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn squared_error_matches_analytic_gradient() {
        // loss = (W·x − t)², dloss/dW = 2(W·x − t) xᵀ
        let w = Tensor::from_rows(&[&[0.3, -0.7, 1.2]]).unwrap();
        let x = Tensor::from_rows(&[&[1.5], &[0.5], &[-2.0]]).unwrap();
        let t = 0.25;
        let params = [w.clone()];
        let mut g = Graph::new(&params);
        let wv = g.param(0).unwrap();
        let xv = g.constant(x.clone());
        let tv = g.constant(Tensor::full(&[1, 1], t));
        let y = g.matmul(wv, xv).unwrap();
        let r = g.sub(y, tv).unwrap();
        let sq = g.mul(r, r).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let wx: f64 = w.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        for (i, gv) in grads.param(0).unwrap().data().iter().enumerate() {
            let expect = 2.0 * (wx - t) * x.data()[i];
            assert!((gv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_off_path_has_no_gradient() {
        let params = [Tensor::full(&[2], 1.0), Tensor::full(&[3], 2.0)];
        let mut g = Graph::new(&params);
        let a = g.param(0).unwrap();
        let _b = g.param(1).unwrap();
        let loss = g.sum(a).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(1).is_none());
        let all = grads.into_param_grads(&params);
        assert_eq!(all[1].data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let params = [Tensor::full(&[2], 1.0)];
        let mut g = Graph::new(&params);
        let a = g.param(0).unwrap();
        let r = g.relu(a).unwrap();
        assert!(g.backward(r).is_err());
    }

    #[test]
    fn param_leaf_is_shared() {
        let params = [Tensor::full(&[2], 1.0)];
        let mut g = Graph::new(&params);
        let a = g.param(0).unwrap();
        let b = g.param(0).unwrap();
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s).unwrap();
        assert_eq!(g.backward(loss).unwrap().param(0).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_inverted_in_training() {
        let params = [Tensor::full(&[1, 1000], 1.0)];
        let mut g = Graph::new(&params);
        let a = g.param(0).unwrap();
        assert_eq!(g.dropout(a, 0.1).unwrap(), a);

        let mut g = Graph::training(&params, 7);
        let a = g.param(0).unwrap();
        let d = g.dropout(a, 0.25).unwrap();
        let vals = g.value(d).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept), "kept {kept}");
    }

    #[test]
    fn nan_is_reported_not_propagated() {
        let params = [Tensor::full(&[1, 1], 1e300)];
        let mut g = Graph::new(&params);
        let a = g.param(0).unwrap();
        assert!(matches!(g.mul(a, a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn embedding_rejects_unknown_token() {
        let params = [Tensor::zeros(&[3, 2])];
        let mut g = Graph::new(&params);
        let t = g.param(0).unwrap();
        assert!(matches!(g.embedding(t, &[0, 3]), Err(Error::OutOfRange { .. })));
    }
}
