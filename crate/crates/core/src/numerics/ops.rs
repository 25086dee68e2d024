//! Forward kernels shared by the tensor-level API and the graph.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{check_finite, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// `a[m×k] · b[k×p]`.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * p..(i + 1) * p];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    out
}

/// `a[m×k] · b[p×k]ᵀ`.
pub(crate) fn matmul_t_kernel(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * p + j] = dot(a_row, b_row);
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×p]`.
pub(crate) fn t_matmul_kernel(a: &[f64], b: &[f64], k: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * p..(kk + 1) * p];
        for (i, &a_ki) in a_row.iter().enumerate() {
            let out_row = &mut out[i * p..(i + 1) * p];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ki * b_kj;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place max-subtracted softmax of one contiguous row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax` of one row.
pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| math::exp(v - max)).sum();
    let lse = max + math::ln(sum);
    row.iter().map(|v| v - lse).collect()
}

/// Normalizes one row into `out`, writes the normalized-but-unscaled values
/// into `xhat` and returns `1/sqrt(var + eps)`.
///
/// A row whose entries are all equal normalizes to exactly zero, so the
/// output is exactly `bias` whatever the gain.
pub(crate) fn layer_norm_row(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
    xhat: &mut [f64],
) -> f64 {
    let d = x.len() as f64;
    let constant = x.iter().all(|&v| v == x[0]);
    let mean = x.iter().sum::<f64>() / d;
    let var = if constant {
        0.0
    } else {
        x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d
    };
    let inv_std = 1.0 / math::sqrt(var + eps);
    for i in 0..x.len() {
        xhat[i] = if constant { 0.0 } else { (x[i] - mean) * inv_std };
        out[i] = xhat[i] * gain[i] + bias[i];
    }
    inv_std
}

/// Standard matrix product of `a[m×k]` and `b[k×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let out = matmul_kernel(a.data(), b.data(), m, k, p);
    check_finite(&out, "matmul")?;
    Ok(Tensor::from_parts(vec![m, p], out))
}

/// Softmax along `axis`, with the per-slice maximum subtracted first.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len().max(1) {
        return Err(Error::invalid("softmax axis out of range"));
    }
    let len = if shape.is_empty() { 1 } else { shape[axis] };
    if len == 0 {
        return Err(Error::invalid("softmax over an empty axis"));
    }
    let outer: usize = shape[..axis.min(shape.len())].iter().product();
    let inner: usize = shape.get(axis + 1..).map_or(1, |s| s.iter().product());
    let mut out = x.data().to_vec();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[base + j * inner] = *b;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Layer normalization over the last axis (each row of a matrix):
/// `(x − mean) / sqrt(var + eps) * gain + bias` with the population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = if x.rank() == 2 { x.cols() } else { x.numel() };
    if d < 2 {
        return Err(Error::invalid("layer_norm needs at least two elements"));
    }
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    if !(eps >= 0.0) {
        return Err(Error::invalid("layer_norm eps must be non-negative"));
    }
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; d];
    for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        layer_norm_row(row, gain.data(), bias.data(), eps, o, &mut xhat);
    }
    check_finite(&out, "layer_norm")?;
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = t(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let z = matmul(&Tensor::zeros(&[2, 2]), &a).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_example() {
        let out = matmul(&t(&[&[1.0, 2.0], &[3.0, 4.0]]), &t(&[&[5.0], &[6.0]])).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        match err {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transposed_kernels_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3×4
        let plain = matmul_kernel(&a, &b, 2, 3, 4);
        let bt = Tensor::new(&[3, 4], b.clone()).unwrap().transpose().unwrap();
        assert_eq!(matmul_t_kernel(&a, bt.data(), 2, 3, 4), plain);
        let at = Tensor::new(&[2, 3], a.clone()).unwrap().transpose().unwrap();
        assert_eq!(t_matmul_kernel(at.data(), &b, 3, 2, 4), plain);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }

        let c = 12.5;
        let s = softmax(&Tensor::new(&[2], vec![c, c + 1000.0]).unwrap(), 0).unwrap();
        assert!(s.data()[0] < 1e-300 && (s.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_respects_axis() {
        let x = t(&[&[1.0, 2.0, 3.0], &[0.0, 0.0, 5.0]]);
        let cols = softmax(&x, 0).unwrap();
        for j in 0..3 {
            let s = cols.at(0, j) + cols.at(1, j);
            assert!((s - 1.0).abs() < 1e-12);
        }
        let rows = softmax(&x, 1).unwrap();
        for i in 0..2 {
            assert!((rows.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
        assert!(softmax(&Tensor::zeros(&[2, 0]), 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let out = layer_norm(&Tensor::new(&[2], vec![1.0, 3.0]).unwrap(), &ones, &zeros, 0.0).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);

        // constant input: exactly the bias, whatever the gain
        let x = Tensor::full(&[5], 0.1);
        let gain = Tensor::new(&[5], vec![3.0, -2.0, 7.0, 0.5, 1.0]).unwrap();
        let bias = Tensor::new(&[5], vec![0.3, 0.1, -0.2, 0.0, 9.0]).unwrap();
        assert_eq!(layer_norm(&x, &gain, &bias, 1e-6).unwrap(), bias);

        assert!(layer_norm(&Tensor::zeros(&[1]), &Tensor::zeros(&[1]), &Tensor::zeros(&[1]), 1e-6).is_err());
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let x: Vec<f64> = [0.3, -1.2, 2.5, 0.0, 4.4, -0.7, 1.1, 3.3].to_vec();
        let gain: Vec<f64> = (0..8).map(|i| 0.5 + 0.1 * i as f64).collect();
        let bias: Vec<f64> = (0..8).map(|i| -0.2 * i as f64).collect();
        let eps = 1e-5;
        let mean = x.iter().sum::<f64>() / 8.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let out = layer_norm(
            &Tensor::new(&[8], x.clone()).unwrap(),
            &Tensor::new(&[8], gain.clone()).unwrap(),
            &Tensor::new(&[8], bias.clone()).unwrap(),
            eps,
        )
        .unwrap();
        for i in 0..8 {
            let expect = (x[i] - mean) / (var + eps).sqrt() * gain[i] + bias[i];
            assert!((out.data()[i] - expect).abs() < 1e-12);
        }
    }
}
