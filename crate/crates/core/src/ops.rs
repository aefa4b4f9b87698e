//! Scalar activations and whole-matrix reductions.

use crate::error::{shape_err, Error, Result};
use crate::matrix::{fmt_shape, Matrix};

/// Logistic function evaluated as `0.5 · (1 + tanh(0.5 x))`.
///
/// Every attention path in the crate goes through this form so that naive and
/// tiled kernels agree bit for bit.
#[inline]
pub fn sigmoid_via_tanh(x: f64) -> f64 {
    0.5 * (1.0 + (0.5 * x).tanh())
}

/// Derivative of the logistic function expressed through its value.
#[inline]
pub fn sigmoid_grad_from_value(p: f64) -> f64 {
    p * (1.0 - p)
}

/// Row-wise softmax with optional visibility mask (`1` visible, `0` masked).
pub fn row_softmax(m: &Matrix, mask: Option<&Matrix>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.shape() != m.shape() {
            return Err(shape_err("row_softmax", fmt_shape(m.shape()), fmt_shape(mask.shape())));
        }
        if mask.data().iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let visible = |j: usize| mask.is_none_or(|mk| mk.get(i, j) == 1.0);
        softmax_row_into(m.row(i), visible, out.row_mut(i)).ok_or(Error::FullyMaskedRow(i))?;
    }
    Ok(out)
}

/// Max-subtracted softmax of one row; `None` if every entry is masked.
pub(crate) fn softmax_row_into(row: &[f64], visible: impl Fn(usize) -> bool, out: &mut [f64]) -> Option<()> {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if visible(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut sum = 0.0;
    for (j, (&x, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        *o = if visible(j) { (x - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Some(())
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value by power iteration on `mᵀm`.
///
/// Stops after `iters` rounds or once successive estimates differ by less
/// than `tol`.
pub fn spectral_norm(m: &Matrix, iters: usize, tol: f64) -> f64 {
    assert!(!m.is_empty(), "spectral_norm of empty matrix");
    assert!(iters >= 1);
    let n = m.cols();
    // irregular start so it is unlikely to be orthogonal to the top vector
    let mut v: Vec<f64> = (0..n).map(|j| 1.0 + 1.0 / (j as f64 + 1.7)).collect();
    normalize(&mut v);
    let mut est = 0.0;
    for _ in 0..iters {
        let mv = mat_vec(m, &v);
        let next = norm2(&mv);
        if next == 0.0 {
            return 0.0;
        }
        let mut w = mat_t_vec(m, &mv);
        if normalize(&mut w) == 0.0 {
            return next;
        }
        v = w;
        let done = (next - est).abs() < tol;
        est = next;
        if done {
            break;
        }
    }
    est.max(norm2(&mat_vec(m, &v)))
}

pub(crate) fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

pub(crate) fn mat_t_vec(m: &Matrix, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, &ui) in u.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(m.row(i)) {
            *o += ui * a;
        }
    }
    out
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn normalize(v: &mut [f64]) -> f64 {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}
