//! QK normalization, rotary embeddings and the LayerNorm primitive both use.

use crate::error::{invalid, shape_err, Result};
use crate::matrix::Matrix;

/// Default RoPE base.
pub const ROPE_BASE: f64 = 10_000.0;

/// Normalized rows and inverse standard deviations saved for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Per-row LayerNorm: `gain ⊙ (x − μ)/√(σ² + eps) (+ shift)`.
pub fn layer_norm(x: &Matrix, gain: &[f64], shift: Option<&[f64]>, eps: f64) -> (Matrix, LayerNormCache) {
    let (n, d) = x.shape();
    assert_eq!(gain.len(), d);
    let mut xhat = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        let xh = xhat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        let xh = xhat.row(i).to_vec();
        let yr = y.row_mut(i);
        for k in 0..d {
            yr[k] = gain[k] * xh[k] + shift.map_or(0.0, |s| s[k]);
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `dx` and accumulates into `dgain` / `dshift`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &Matrix,
    dgain: &mut [f64],
    mut dshift: Option<&mut [f64]>,
) -> Matrix {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for k in 0..d {
            dgain[k] += dyr[k] * xh[k];
            if let Some(ds) = dshift.as_deref_mut() {
                ds[k] += dyr[k];
            }
            dxhat[k] = dyr[k] * gain[k];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.inv_std[i];
        let dxr = dx.row_mut(i);
        for k in 0..d {
            dxr[k] = r * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
        }
    }
    dx
}

/// LayerNorm over each row without additive shift.
pub fn qk_normalize(m: &Matrix, gain: &[f64], eps: f64) -> Result<Matrix> {
    if gain.len() != m.cols() {
        return Err(shape_err("qk_normalize", format!("gain of length {}", m.cols()), format!("{}", gain.len())));
    }
    Ok(layer_norm(m, gain, None, eps).0)
}

fn rope_rotate(m: &Matrix, base: f64, sign: f64) -> Result<Matrix> {
    let d = m.cols();
    if !d.is_multiple_of(2) {
        return Err(invalid(format!("RoPE needs an even feature dimension, got {d}")));
    }
    let mut out = m.clone();
    for p in 0..m.rows() {
        let row = out.row_mut(p);
        for k in 0..d / 2 {
            let theta = sign * p as f64 * base.powf(-2.0 * k as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            let (x, y) = (row[2 * k], row[2 * k + 1]);
            row[2 * k] = x * c - y * s;
            row[2 * k + 1] = x * s + y * c;
        }
    }
    Ok(out)
}

/// Rotates row `p` pairwise by angles `p · base^(−2k/d)`.
pub fn apply_rope(m: &Matrix, base: f64) -> Result<Matrix> {
    rope_rotate(m, base, 1.0)
}

/// Transpose of [`apply_rope`]; maps output gradients to input gradients.
pub fn rope_backward(grad: &Matrix, base: f64) -> Result<Matrix> {
    rope_rotate(grad, base, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_normal, Rng};

    #[test]
    fn constant_row_normalizes_to_zero() {
        let m = Matrix::filled(2, 4, 3.5);
        let out = qk_normalize(&m, &[1.0; 4], 1e-6).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn symmetric_pair() {
        let m = Matrix::row_vector(&[1.0, -1.0]);
        let out = qk_normalize(&m, &[1.0, 1.0], 1e-300).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((out.get(0, 1) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_variance_rows() {
        let m = rng_normal(&mut Rng::new(5), 10, 16, 2.0, 3.0, None);
        let out = qk_normalize(&m, &[1.0; 16], 1e-12).unwrap();
        for i in 0..10 {
            let row = out.row(i);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gain_length_checked() {
        assert!(qk_normalize(&Matrix::zeros(2, 3), &[1.0; 2], 1e-6).is_err());
    }

    #[test]
    fn rope_position_zero_and_norms() {
        let m = rng_normal(&mut Rng::new(2), 6, 8, 0.0, 1.0, None);
        let r = apply_rope(&m, ROPE_BASE).unwrap();
        assert_eq!(r.row(0), m.row(0));
        for i in 0..6 {
            let a: f64 = m.row(i).iter().map(|x| x * x).sum();
            let b: f64 = r.row(i).iter().map(|x| x * x).sum();
            assert!((a.sqrt() - b.sqrt()).abs() < 1e-12);
        }
        let back = rope_backward(&r, ROPE_BASE).unwrap();
        assert!(back.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn rope_single_rotation() {
        let m = Matrix::from_fn(5, 2, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let r = apply_rope(&m, 123.0).unwrap();
        for p in 0..5 {
            assert!((r.get(p, 0) - (p as f64).cos()).abs() < 1e-15);
            assert!((r.get(p, 1) - (p as f64).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn rope_rejects_odd() {
        assert!(apply_rope(&Matrix::zeros(2, 3), ROPE_BASE).is_err());
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let x = rng_normal(&mut Rng::new(11), 3, 5, 0.0, 1.0, None);
        let gain = [0.5, 1.5, -1.0, 2.0, 0.7];
        let shift = [0.1, 0.0, -0.2, 0.3, 0.0];
        let w = rng_normal(&mut Rng::new(12), 3, 5, 0.0, 1.0, None);
        let loss = |x: &Matrix| -> f64 {
            let (y, _) = layer_norm(x, &gain, Some(&shift), 1e-5);
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer_norm(&x, &gain, Some(&shift), 1e-5);
        let mut dg = [0.0; 5];
        let mut ds = [0.0; 5];
        let dx = layer_norm_backward(&cache, &gain, &w, &mut dg, Some(&mut ds));
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-7, "{fd} vs {}", dx.data()[idx]);
        }
    }
}
