//! Activations and normalisation, with the backward rules the learners need.

use super::Matrix;
use crate::error::{Error, Result};

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-row intermediates of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    /// Normalised input before gain and bias.
    pub normalized: Matrix,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<f64>,
}

/// Layer normalisation over each row followed by the affine `gain`/`bias`
/// (both `1 x cols`).
pub fn layer_norm(m: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
    layer_norm_forward(m, gain, bias, eps).map(|(out, _)| out)
}

pub fn layer_norm_forward(m: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<(Matrix, LayerNormCache)> {
    let cols = m.cols();
    if gain.shape() != (1, cols) {
        return Err(Error::shape("layer_norm gain", m.shape(), gain.shape()));
    }
    if bias.shape() != (1, cols) {
        return Err(Error::shape("layer_norm bias", m.shape(), bias.shape()));
    }
    let n = cols as f64;
    let mut normalized = Matrix::zeros(m.rows(), cols);
    let mut out = Matrix::zeros(m.rows(), cols);
    let mut inv_std = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = m.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        let nrow = normalized.row_mut(r);
        for (o, &v) in nrow.iter_mut().zip(row) {
            *o = (v - mean) * istd;
        }
        let nrow = normalized.row(r).to_vec();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = nrow[c] * gain.data()[c] + bias.data()[c];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(d_input, d_gain, d_bias)` for upstream gradient `dy`.
pub fn layer_norm_backward(cache: &LayerNormCache, gain: &Matrix, dy: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let xh = &cache.normalized;
    if dy.shape() != xh.shape() {
        return Err(Error::shape("layer_norm_backward", xh.shape(), dy.shape()));
    }
    let cols = xh.cols();
    let n = cols as f64;
    let mut dx = Matrix::zeros(xh.rows(), cols);
    let mut dgain = Matrix::zeros(1, cols);
    let dbias = dy.sum_rows();
    for r in 0..xh.rows() {
        let xr = xh.row(r);
        let dyr = dy.row(r);
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for c in 0..cols {
            dgain.data_mut()[c] += dyr[c] * xr[c];
            let dxh = dyr[c] * gain.data()[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xr[c];
        }
        let istd = cache.inv_std[r];
        let dxr = dx.row_mut(r);
        for c in 0..cols {
            let dxh = dyr[c] * gain.data()[c];
            dxr[c] = istd * (dxh - sum_dxh / n - xr[c] * sum_dxh_xh / n);
        }
    }
    Ok((dx, dgain, dbias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(values: &[f64]) -> Matrix {
        Matrix::row_vector(values)
    }

    #[test]
    fn softmax_symmetric_row() {
        let s = softmax_rows(&row(&[0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let s = softmax_rows(&row(&[1000.0, 0.0]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_log_ratio_row() {
        let s = softmax_rows(&row(&[1f64.ln(), 3f64.ln()]));
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = row(&[4.0, 4.0, 4.0]);
        let out = layer_norm(&x, &Matrix::filled(1, 3, 1.0), &Matrix::zeros(1, 3), 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_values() {
        let x = row(&[1.0, 3.0]);
        let out = layer_norm(&x, &Matrix::filled(1, 2, 1.0), &Matrix::zeros(1, 2), 1e-14).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-10);
        assert!((out.data()[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_zero_gain_gives_bias() {
        let x = row(&[1.0, -7.0, 2.5]);
        let bias = row(&[0.1, 0.2, 0.3]);
        let out = layer_norm(&x, &Matrix::zeros(1, 3), &bias, 1e-5).unwrap();
        assert_eq!(out, bias);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert_eq!(sigmoid(800.0), 1.0);
    }

    fn matrix_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
            prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in matrix_strategy(6, 9)) {
            let s = softmax_rows(&m);
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn layer_norm_ignores_row_offset(m in matrix_strategy(4, 8), shift in -100.0f64..100.0) {
            let g = Matrix::filled(1, m.cols(), 1.3);
            let b = Matrix::filled(1, m.cols(), -0.2);
            let a = layer_norm(&m, &g, &b, 1e-5).unwrap();
            let shifted = layer_norm(&m.map(|v| v + shift), &g, &b, 1e-5).unwrap();
            prop_assert!(a.max_abs_diff(&shifted) <= 1e-9);
        }

        #[test]
        fn layer_norm_standardises_rows(m in matrix_strategy(4, 8)) {
            prop_assume!(m.cols() >= 2);
            let spread = (0..m.rows()).all(|r| {
                let row = m.row(r);
                row.iter().any(|&v| (v - row[0]).abs() > 1e-3)
            });
            prop_assume!(spread);
            let out = layer_norm(&m, &Matrix::filled(1, m.cols(), 1.0), &Matrix::zeros(1, m.cols()), 1e-300).unwrap();
            for r in 0..out.rows() {
                let row = out.row(r);
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((var - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn matmul_is_associative(
            (a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(p, q, r, s)| (
                prop::collection::vec(-3.0f64..3.0, p * q).prop_map(move |v| Matrix::from_vec(p, q, v).unwrap()),
                prop::collection::vec(-3.0f64..3.0, q * r).prop_map(move |v| Matrix::from_vec(q, r, v).unwrap()),
                prop::collection::vec(-3.0f64..3.0, r * s).prop_map(move |v| Matrix::from_vec(r, s, v).unwrap()),
            ))
        ) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let diff = left.sub(&right).unwrap().frobenius_norm();
            let scale = left.frobenius_norm().max(1e-12);
            prop_assert!(diff / scale <= 1e-9 || diff <= 1e-12);
        }
    }
}
