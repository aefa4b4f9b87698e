//! Regularity of `X ↦ σ(XW_q (XW_k)ᵀ·s + b) XW_v` with `s = 1/√d_qk`.
//!
//! The logit scale is folded into `A = s·W_q W_kᵀ`, so every logit is
//! `x_i A x_jᵀ` (rows as tokens) and all reported quantities refer to that
//! scaled matrix.

use serde::{Deserialize, Serialize};

use crate::attn::{attn_backward, attn_forward, AttnConfig, BiasMode};
use crate::error::{shape_err, Result};
use crate::matrix::{mm, mm_nt, Matrix};
use crate::ops::{normalize, sigmoid_grad_from_value, sigmoid_via_tanh, spectral_norm};
use crate::rng::{rng_normal, Rng};

const SPECTRAL_ITERS: usize = 20_000;
const SPECTRAL_TOL: f64 = 1e-15;

/// Above this many input coordinates the adjoint is applied through the
/// attention backward pass instead of an assembled Jacobian.
pub const EXPLICIT_JACOBIAN_MAX: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// `n · max σ(u + b)` over the realized logits.
    pub sigma_inf: f64,
    /// `n · max σ′(u + b)` over the realized logits.
    pub sigma_prime_inf: f64,
    /// `‖A‖₂` with the logit scale folded in.
    pub a_spec: f64,
    /// `(1/n) Σ ‖x_i‖²`.
    pub mean_sq_norm: f64,
    pub wv_spec: f64,
    pub bound: f64,
    /// Logit scale folded into `A`.
    pub scale: f64,
    /// Global caps `n` and `n/4` for comparison.
    pub sigma_inf_cap: f64,
    pub sigma_prime_inf_cap: f64,
}

fn check(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<()> {
    let d = x.cols();
    for (name, w) in [("W_q", wq), ("W_k", wk), ("W_v", wv)] {
        if w.rows() != d {
            return Err(shape_err("lipschitz", format!("{name} with {d} rows"), format!("{}", w.rows())));
        }
    }
    if wq.cols() != wk.cols() {
        return Err(shape_err("lipschitz", format!("W_k with {} cols", wq.cols()), format!("{}", wk.cols())));
    }
    Ok(())
}

fn scale_of(wq: &Matrix) -> f64 {
    AttnConfig::sigmoid().scale_for(wq.cols())
}

/// `A = s·W_q W_kᵀ` (d × d).
fn a_matrix(wq: &Matrix, wk: &Matrix) -> Matrix {
    mm_nt(wq, wk).scale(scale_of(wq))
}

/// Logits `u_ij = x_i A x_jᵀ`.
fn logits(x: &Matrix, a: &Matrix) -> Matrix {
    mm_nt(&mm(x, a), x)
}

pub fn lipschitz_bound(wq: &Matrix, wk: &Matrix, wv: &Matrix, x: &Matrix, b: f64) -> Result<LipschitzReport> {
    check(x, wq, wk, wv)?;
    let n = x.rows() as f64;
    let a = a_matrix(wq, wk);
    let u = logits(x, &a);
    let (mut smax, mut dmax) = (0.0f64, 0.0f64);
    for &v in u.data() {
        let s = sigmoid_via_tanh(v + b);
        smax = smax.max(s);
        dmax = dmax.max(sigmoid_grad_from_value(s));
    }
    let sigma_inf = n * smax;
    let sigma_prime_inf = n * dmax;
    let a_spec = spectral_norm(&a, SPECTRAL_ITERS, SPECTRAL_TOL);
    let wv_spec = spectral_norm(wv, SPECTRAL_ITERS, SPECTRAL_TOL);
    let mean_sq_norm = x.data().iter().map(|v| v * v).sum::<f64>() / n;
    let bound = wv_spec * (sigma_inf + 2.0 * sigma_prime_inf * a_spec * mean_sq_norm);
    Ok(LipschitzReport {
        sigma_inf,
        sigma_prime_inf,
        a_spec,
        mean_sq_norm,
        wv_spec,
        bound,
        scale: scale_of(wq),
        sigma_inf_cap: n,
        sigma_prime_inf_cap: n / 4.0,
    })
}

/// Directional derivative of the attention map at `x` along `delta`:
/// row `i` is `[Σ_j σ′_ij (δ_i A x_jᵀ + x_i A δ_jᵀ) x_j + σ_ij δ_j] W_v`.
pub fn attn_jacobian_apply(
    x: &Matrix,
    delta: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    b: f64,
) -> Result<Matrix> {
    check(x, wq, wk, wv)?;
    if delta.shape() != x.shape() {
        return Err(shape_err(
            "attn_jacobian_apply",
            format!("{}x{}", x.rows(), x.cols()),
            format!("{}x{}", delta.rows(), delta.cols()),
        ));
    }
    let (n, d) = x.shape();
    let a = a_matrix(wq, wk);
    let u = logits(x, &a);
    // δ_i A x_jᵀ and x_i A δ_jᵀ for all pairs
    let da_x = mm_nt(&mm(delta, &a), x);
    let xa_d = mm_nt(&mm(x, &a), delta);
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let mut row = vec![0.0; d];
        for j in 0..n {
            let s = sigmoid_via_tanh(u.get(i, j) + b);
            let ds = sigmoid_grad_from_value(s);
            let coef = ds * (da_x.get(i, j) + xa_d.get(i, j));
            for ((r, &xj), &dj) in row.iter_mut().zip(x.row(j)).zip(delta.row(j)) {
                *r += coef * xj + s * dj;
            }
        }
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(mm(&out, wv))
}

/// The attention map itself, used as the finite-difference reference.
pub fn attn_map(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, b: f64) -> Result<Matrix> {
    check(x, wq, wk, wv)?;
    let cfg = AttnConfig::sigmoid().with_bias(BiasMode::Constant(b));
    Ok(attn_forward(&mm(x, wq), &mm(x, wk), &mm(x, wv), &cfg)?.o)
}

/// Transposed Jacobian applied to an output cotangent, through the analytic
/// attention backward pass.
pub fn attn_jacobian_adjoint(
    x: &Matrix,
    cot: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    b: f64,
) -> Result<Matrix> {
    check(x, wq, wk, wv)?;
    let cfg = AttnConfig::sigmoid().with_bias(BiasMode::Constant(b));
    let g = attn_backward(&mm(x, wq), &mm(x, wk), &mm(x, wv), cot, &cfg)?;
    let dx = mm_nt(&g.dq, wq).add(&mm_nt(&g.dk, wk))?.add(&mm_nt(&g.dv, wv))?;
    Ok(dx)
}

/// How the transposed Jacobian was applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointPath {
    /// Jacobian assembled column by column from basis directions.
    Explicit,
    /// Vector-Jacobian product through the attention backward pass.
    Backprop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianNormEstimate {
    pub norm: f64,
    /// `‖J v_k‖` after each round; nondecreasing.
    pub history: Vec<f64>,
    pub path: AdjointPath,
    pub seed: u64,
}

/// Power iteration on `JᵀJ` from a seeded random start. Every iterate is a
/// lower bound on `‖J‖₂`.
pub fn empirical_jacobian_norm(
    x: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    b: f64,
    iters: usize,
    seed: u64,
) -> Result<JacobianNormEstimate> {
    let path = if x.len() <= EXPLICIT_JACOBIAN_MAX {
        AdjointPath::Explicit
    } else {
        AdjointPath::Backprop
    };
    empirical_jacobian_norm_with(x, wq, wk, wv, b, iters, seed, path)
}

#[allow(clippy::too_many_arguments)]
pub fn empirical_jacobian_norm_with(
    x: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    b: f64,
    iters: usize,
    seed: u64,
    path: AdjointPath,
) -> Result<JacobianNormEstimate> {
    check(x, wq, wk, wv)?;
    if iters < 10 {
        return Err(crate::error::invalid(format!("iters must be >= 10, got {iters}")));
    }
    let (n, d) = x.shape();
    let dim = n * d;
    let explicit = if path == AdjointPath::Explicit {
        let out_dim = n * wv.cols();
        let mut jac = Matrix::zeros(out_dim, dim);
        for c in 0..dim {
            let mut e = Matrix::zeros(n, d);
            e.data_mut()[c] = 1.0;
            let col = attn_jacobian_apply(x, &e, wq, wk, wv, b)?;
            for (r, &v) in col.data().iter().enumerate() {
                jac.set(r, c, v);
            }
        }
        Some(jac)
    } else {
        None
    };

    let mut rng = Rng::new(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    normalize(&mut v);
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let (jv, mut w) = match &explicit {
            Some(jac) => {
                let jv = crate::ops::mat_vec(jac, &v);
                let w = crate::ops::mat_t_vec(jac, &jv);
                (jv, w)
            }
            None => {
                let vm = Matrix::from_vec_unchecked(n, d, v.clone());
                let jv = attn_jacobian_apply(x, &vm, wq, wk, wv, b)?;
                let w = attn_jacobian_adjoint(x, &jv, wq, wk, wv, b)?.into_data();
                (jv.into_data(), w)
            }
        };
        let est = crate::ops::norm2(&jv);
        history.push(est);
        if normalize(&mut w) == 0.0 {
            break;
        }
        v = w;
    }
    let norm = history.iter().cloned().fold(0.0, f64::max);
    Ok(JacobianNormEstimate {
        norm,
        history,
        path,
        seed,
    })
}

/// A random instance: `n` tokens on the sphere of radius `radius` in
/// `ℝ^d`, weights with i.i.d. `N(0, 1/d)` entries.
pub fn lipschitz_instance(n: usize, d: usize, radius: f64, seed: u64) -> (Matrix, Matrix, Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    let mut x = rng_normal(&mut rng, n, d, 0.0, 1.0, None);
    for i in 0..n {
        let row = x.row_mut(i);
        let norm = normalize(row);
        if norm == 0.0 {
            row[0] = 1.0;
        }
        row.iter_mut().for_each(|v| *v *= radius);
    }
    let std = 1.0 / (d as f64).sqrt();
    let wq = rng_normal(&mut rng, d, d, 0.0, std, None);
    let wk = rng_normal(&mut rng, d, d, 0.0, std, None);
    let wv = rng_normal(&mut rng, d, d, 0.0, std, None);
    (x, wq, wk, wv)
}

/// Bound vs estimate on one random instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub seed: u64,
    pub radius: f64,
    pub bound: f64,
    pub estimate: f64,
    /// `estimate / bound`; 0 when the bound is 0.
    pub ratio: f64,
    pub pass: bool,
}

/// Relative slack allowed between the power-iteration estimate and the bound.
pub const LIPSCHITZ_SLACK: f64 = 1e-9;

pub fn lipschitz_check(n: usize, d: usize, radius: f64, b: f64, iters: usize, seed: u64) -> Result<LipschitzCheck> {
    let (x, wq, wk, wv) = lipschitz_instance(n, d, radius, seed);
    let bound = lipschitz_bound(&wq, &wk, &wv, &x, b)?.bound;
    let estimate = empirical_jacobian_norm(&x, &wq, &wk, &wv, b, iters, seed ^ 0x5eed)?.norm;
    Ok(LipschitzCheck {
        seed,
        radius,
        bound,
        estimate,
        ratio: if bound > 0.0 { estimate / bound } else { 0.0 },
        pass: estimate <= bound * (1.0 + LIPSCHITZ_SLACK),
    })
}
