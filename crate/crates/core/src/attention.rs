//! Scaled dot-product attention and its multi-head composition.
//!
//! For query row `i`, the weights over key rows are
//! `softmax_j(q_i · k_j / √n)` with `n` the head dimension; the output row
//! is `Σ_j α_ij v_j`. Multi-head attention runs `L` such heads on their own
//! projections, concatenates the `L` head outputs in head order and maps the
//! `L·n` columns back to `d` with `W^c`.
//!
//! Masked positions get `-1e30` before the softmax and are set to exactly
//! zero afterwards, so a masked weight is `0.0` rather than merely tiny.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::ActivationTrace;
use crate::numerics::{Graph, Tensor, Var};

/// Value written into masked scores before the softmax.
pub const MASK_FILL: f64 = -1e30;

/// Parameter indices of one head's `W^q`, `W^k`, `W^v`, each `n × d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionHeadParams {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
}

/// Heads plus the `d × (L·n)` output projection `W^c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHeadParams {
    pub heads: Vec<AttentionHeadParams>,
    pub wc: usize,
}

/// Attention weights of one head: `T_q × T_k`, rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub alpha: Tensor,
}

/// Which (query, key) pairs may attend; `true` means allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Positions to be filled, in row-major order.
    fn filled(&self) -> Vec<bool> {
        self.allowed.iter().map(|a| !a).collect()
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: alloc::vec![self.rows, self.cols],
                rhs: alloc::vec![rows, cols],
            });
        }
        for i in 0..rows {
            if !(0..cols).any(|j| self.allowed(i, j)) {
                return Err(Error::invalid(format!(
                    "query row {i} is fully masked and has nothing to attend to"
                )));
            }
        }
        Ok(())
    }
}

/// Position `(i, j)` is allowed iff `j ≤ i`.
pub fn causal_mask(t: usize) -> Result<Mask> {
    if t == 0 {
        return Err(Error::invalid("causal mask needs at least one position"));
    }
    Ok(Mask::from_fn(t, t, |i, j| j <= i))
}

/// Queries from `queries_from`, keys and values from `keys_from`:
/// `Q = y·W^qᵀ`, `K = c·W^kᵀ`, `V = c·W^vᵀ`.
pub fn project_qkv_graph(
    g: &mut Graph<'_>,
    queries_from: Var,
    keys_from: Var,
    head: &AttentionHeadParams,
) -> Result<(Var, Var, Var)> {
    let wq = g.param(head.wq)?;
    let wk = g.param(head.wk)?;
    let wv = g.param(head.wv)?;
    let q = g.matmul_t(queries_from, wq)?;
    let k = g.matmul_t(keys_from, wk)?;
    let v = g.matmul_t(keys_from, wv)?;
    Ok((q, k, v))
}

/// Returns the attended output (`T_q × n`) and the weights (`T_q × T_k`).
pub fn scaled_attention_graph(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    let (tq, n) = (g.value(q).rows(), g.value(q).cols());
    let (tk, kn) = (g.value(k).rows(), g.value(k).cols());
    if n != kn || g.value(v).rows() != tk {
        return Err(Error::Shape {
            op: "scaled_attention",
            lhs: g.value(q).shape().to_vec(),
            rhs: g.value(k).shape().to_vec(),
        });
    }
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / math::sqrt(n as f64))?;
    let weights = match mask {
        None => g.softmax_rows(scores)?,
        Some(m) => {
            m.check(tq, tk)?;
            let filled = m.filled();
            let s = g.mask_fill(scores, &filled, MASK_FILL)?;
            let w = g.softmax_rows(s)?;
            g.mask_fill(w, &filled, 0.0)?
        }
    };
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention of `y` over `context` (or over itself). Records
/// per-head `q`, `k`, `v`, `alpha` and the projected output `z` under
/// `prefix` when tracing is on.
pub fn multi_head_graph(
    g: &mut Graph<'_>,
    y: Var,
    mh: &MultiHeadParams,
    context: Option<Var>,
    mask: Option<&Mask>,
    trace: &mut ActivationTrace,
    prefix: &str,
) -> Result<Var> {
    if mh.heads.is_empty() {
        return Err(Error::invalid("multi-head attention needs at least one head"));
    }
    let source = context.unwrap_or(y);
    if g.value(source).cols() != g.value(y).cols() {
        return Err(Error::Shape {
            op: "multi_head context",
            lhs: g.value(y).shape().to_vec(),
            rhs: g.value(source).shape().to_vec(),
        });
    }
    let mut outputs = Vec::with_capacity(mh.heads.len());
    for (h, head) in mh.heads.iter().enumerate() {
        let (q, k, v) = project_qkv_graph(g, y, source, head)?;
        let (z, alpha) = scaled_attention_graph(g, q, k, v, mask)?;
        if trace.is_enabled() {
            trace.record(format!("{prefix}.head.{h}.q"), g.value(q));
            trace.record(format!("{prefix}.head.{h}.k"), g.value(k));
            trace.record(format!("{prefix}.head.{h}.v"), g.value(v));
            trace.record(format!("{prefix}.head.{h}.alpha"), g.value(alpha));
        }
        outputs.push(z);
    }
    let joined = if outputs.len() == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)?
    };
    let wc = g.param(mh.wc)?;
    let z = g.matmul_t(joined, wc)?;
    trace.record_var(g, format!("{prefix}.z"), z);
    Ok(z)
}

/// `(Q, K, V)` of one head applied to `y`.
pub fn project_qkv(
    params: &[Tensor],
    y: &Tensor,
    head: &AttentionHeadParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut g = Graph::new(params);
    let yv = g.constant(y.clone());
    let (q, k, v) = project_qkv_graph(&mut g, yv, yv, head)?;
    Ok((g.value(q).clone(), g.value(k).clone(), g.value(v).clone()))
}

pub fn scaled_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Mask>,
) -> Result<(Tensor, AttentionWeights)> {
    let mut g = Graph::new(&[]);
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (out, w) = scaled_attention_graph(&mut g, qv, kv, vv, mask)?;
    Ok((
        g.value(out).clone(),
        AttentionWeights {
            alpha: g.value(w).clone(),
        },
    ))
}

pub fn multi_head(
    params: &[Tensor],
    y: &Tensor,
    mh: &MultiHeadParams,
    context: Option<&Tensor>,
    mask: Option<&Mask>,
) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let yv = g.constant(y.clone());
    let cv = context.map(|c| g.constant(c.clone()));
    let out = multi_head_graph(&mut g, yv, mh, cv, mask, &mut ActivationTrace::disabled(), "attn")?;
    Ok(g.value(out).clone())
}
