//! Central finite-difference verification of [`Graph::backward`].

use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors. Tensors whose gradient is
/// smaller than this everywhere are compared on an absolute scale, where
/// central differences at `FD_STEP` cannot resolve relative error anyway.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    /// One entry per trainable parameter; frozen tensors are not listed.
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn rel_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

/// Normwise relative error `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)` of one tensor's
/// gradient. Measuring against the tensor's largest entry rather than
/// element by element keeps near-zero entries, whose finite differences are
/// dominated by rounding in the loss, from swamping the report.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(REL_ERROR_FLOOR)
}

/// Compares `backward()` against central differences for every element of
/// every trainable parameter.
///
/// `build` must construct a scalar loss on the graph it is given and must be
/// deterministic (evaluation mode, no dropout).
pub fn grad_check<F>(
    params: &mut [Tensor],
    trainable: &[bool],
    tolerance: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if trainable.len() != params.len() {
        return Err(Error::invalid("trainable flags must match parameter count"));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.backward(loss)?.into_param_grads(params)
    };
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.value(loss)
            .item()
            .ok_or_else(|| Error::invalid("loss must be scalar"))
    };

    let mut entries = Vec::new();
    for p in 0..params.len() {
        if !trainable[p] {
            continue;
        }
        let mut numeric = Vec::with_capacity(params[p].numel());
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + FD_STEP;
            let plus = eval(params);
            params[p].data_mut()[i] = orig - FD_STEP;
            let minus = eval(params);
            params[p].data_mut()[i] = orig;
            numeric.push((plus? - minus?) / (2.0 * FD_STEP));
        }
        let a = analytic[p].data();
        let max_rel = relative_error(a, &numeric);
        let max_abs = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        entries.push(GradCheckEntry {
            param: p,
            rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel < tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn linear_layer_with_mse() {
        let mut params = vec![sample(&[3, 4], 0.7), sample(&[3], 1.3)];
        let x = sample(&[5, 4], 2.1);
        let t = sample(&[5, 3], 0.4);
        let report = grad_check(&mut params, &[true, true], 1e-6, |g| {
            let w = g.param(0)?;
            let b = g.param(1)?;
            let xv = g.constant(x.clone());
            let tv = g.constant(t.clone());
            let y = g.matmul_t(xv, w)?;
            let y = g.add_row(y, b)?;
            let r = g.sub(y, tv)?;
            let sq = g.mul(r, r)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.rel_error() < 1e-6);
    }

    #[test]
    fn frozen_tensor_is_excluded() {
        let mut params = vec![sample(&[2, 2], 0.3), sample(&[2, 2], 0.9)];
        let report = grad_check(&mut params, &[true, false], 1e-6, |g| {
            let a = g.param(0)?;
            let b = g.param(1)?;
            let c = g.matmul(a, b)?;
            g.sum(c)
        })
        .unwrap();
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].param, 0);
    }

    /// Every primitive, including the nonlinear ones, through one scalar.
    #[test]
    fn every_primitive() {
        let mut params = vec![
            sample(&[3, 4], 0.37),  // x
            sample(&[4, 4], 0.91),  // w
            sample(&[4], 1.7),      // gain
            sample(&[4], 0.23),     // bias
            sample(&[5, 4], 0.61),  // embedding table
        ];
        let mask = vec![false, true, false, false, false, false, true, false, false, false, false, false];
        let report = grad_check(&mut params, &[true; 5], 1e-6, |g| {
            let x = g.param(0)?;
            let w = g.param(1)?;
            let gain = g.param(2)?;
            let bias = g.param(3)?;
            let table = g.param(4)?;
            let h = g.matmul(x, w)?;
            let h = g.scale(h, 0.8)?;
            let n = g.layer_norm(h, gain, bias, 1e-6)?;
            let r = g.relu(n)?;
            let e = g.embedding(table, &[2, 0, 2])?;
            let s = g.add(r, e)?;
            let s = g.add_row(s, bias)?;
            let m = g.mask_fill(s, &mask, -1e30)?;
            let p = g.softmax_rows(m)?;
            let left = g.slice_cols(p, 0, 2)?;
            let right = g.slice_cols(s, 2, 2)?;
            let c = g.concat_cols(&[left, right])?;
            let top = g.slice_rows(c, 1, 2)?;
            let pooled = g.mean_rows(top)?;
            let prod = g.mul(pooled, pooled)?;
            let ce = g.smoothed_cross_entropy(c, &[0, 3, 1], 0.1)?;
            let sq = g.sum(prod)?;
            g.add(ce, sq)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
