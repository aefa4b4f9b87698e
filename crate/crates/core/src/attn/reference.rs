//! Naive attention that materializes the full `n_q × n_k` logit matrix. It is
//! the oracle every other path is compared against.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::{gemm_acc, mm, mm_tn, Matrix};
use crate::ops::{sigmoid_grad_from_value, sigmoid_via_tanh, softmax_row_into};

use super::bias::{alibi_entry, alibi_slope_of, logit_bias, row_lengths, seq_norm_factor};
use super::config::{Activation, AttnConfig};
use super::posenc::{layer_norm, layer_norm_backward, LayerNormCache};

/// Gradients with respect to queries, keys and values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradTriple {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

impl GradTriple {
    pub fn max_abs_diff(&self, other: &GradTriple) -> f64 {
        self.dq
            .max_abs_diff(&other.dq)
            .max(self.dk.max_abs_diff(&other.dk))
            .max(self.dv.max_abs_diff(&other.dv))
    }
}

/// Forward outputs: `o = p·v`, `p` the (normalized) attention weights and `s`
/// the logits they were computed from.
#[derive(Clone, Debug)]
pub struct AttnOutput {
    pub o: Matrix,
    pub p: Matrix,
    pub s: Matrix,
}

/// One logit from its raw `q·k` accumulation. Shared with the tiled kernels
/// so both paths perform identical floating-point operations.
#[inline]
pub(crate) fn finish_logit(dot: f64, scale: f64, row_bias: f64, alibi: f64) -> f64 {
    dot * scale + row_bias + alibi
}

#[inline]
pub(crate) fn alibi_term(slope: Option<f64>, i: usize, j: usize, causal: bool) -> f64 {
    slope.map_or(0.0, |m| alibi_entry(i, j, m, causal))
}

pub(crate) fn check_shapes(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttnConfig) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(shape_err("attention", format!("key width {}", q.cols()), format!("{}", k.cols())));
    }
    if k.rows() != v.rows() {
        return Err(shape_err("attention", format!("value rows {}", k.rows()), format!("{}", v.rows())));
    }
    if q.rows() == 0 || k.rows() == 0 || q.cols() == 0 {
        return Err(Error::InvalidArgument("attention inputs must be non-empty".into()));
    }
    if cfg.causal && q.rows() != k.rows() {
        return Err(shape_err(
            "attention",
            format!("causal needs n_q == n_k ({})", k.rows()),
            format!("{}", q.rows()),
        ));
    }
    Ok(())
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Clone, Debug)]
pub(crate) struct AttnCache {
    pub cfg: AttnConfig,
    pub scale: f64,
    /// Queries and keys after optional QK normalization.
    pub q: Matrix,
    pub k: Matrix,
    pub q_ln: Option<LayerNormCache>,
    pub k_ln: Option<LayerNormCache>,
    pub s: Matrix,
    /// Activation output before sequence-length weighting; masked entries 0.
    pub act: Matrix,
    pub row_weight: Vec<f64>,
    pub p: Matrix,
    pub o: Matrix,
}

/// Forward pass keeping intermediates. `bias_value` overrides the configured
/// scalar bias (used for trainable biases).
pub(crate) fn forward_cached(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttnConfig,
    bias_value: Option<f64>,
) -> Result<AttnCache> {
    cfg.validate()?;
    check_shapes(q, k, v, cfg)?;
    let (n_q, n_k) = (q.rows(), k.rows());
    let d = q.cols();
    let scale = cfg.scale_for(d);

    let (q_used, q_ln, k_used, k_ln) = if cfg.qk_norm {
        let ones = vec![1.0; d];
        let (qn, qc) = layer_norm(q, &ones, None, cfg.qk_norm_eps);
        let (kn, kc) = layer_norm(k, &ones, None, cfg.qk_norm_eps);
        (qn, Some(qc), kn, Some(kc))
    } else {
        (q.clone(), None, k.clone(), None)
    };

    let lens = row_lengths(cfg, n_q, n_k);
    let mut row_bias = logit_bias(cfg, n_k, &lens)?;
    if let Some(b) = bias_value {
        row_bias.iter_mut().for_each(|x| *x = b);
    }
    let slope = alibi_slope_of(cfg);

    let mut s = Matrix::zeros(n_q, n_k);
    gemm_acc(q_used.data(), k_used.transpose().data(), s.data_mut(), n_q, d, n_k);
    for i in 0..n_q {
        let row = s.row_mut(i);
        for (j, x) in row.iter_mut().enumerate() {
            *x = finish_logit(*x, scale, row_bias[i], alibi_term(slope, i, j, cfg.causal));
        }
    }

    let mut act = Matrix::zeros(n_q, n_k);
    for i in 0..n_q {
        let srow = s.row(i);
        let arow = act.row_mut(i);
        match cfg.activation {
            Activation::Softmax => {
                softmax_row_into(srow, |j| cfg.visible(i, j), arow).ok_or(Error::FullyMaskedRow(i))?;
            }
            a => {
                for (j, (o, &x)) in arow.iter_mut().zip(srow).enumerate() {
                    *o = if cfg.visible(i, j) { pointwise(a, x) } else { 0.0 };
                }
            }
        }
    }

    let row_weight: Vec<f64> = lens.iter().map(|&l| seq_norm_factor(l, cfg.alpha)).collect();
    let p = if cfg.alpha == 0.0 {
        act.clone()
    } else {
        let mut p = act.clone();
        for (i, &w) in row_weight.iter().enumerate() {
            p.row_mut(i).iter_mut().for_each(|x| *x *= w);
        }
        p
    };
    let o = mm(&p, v);
    if !o.is_finite() {
        return Err(Error::NonFinite("attn_forward"));
    }
    Ok(AttnCache {
        cfg: *cfg,
        scale,
        q: q_used,
        k: k_used,
        q_ln,
        k_ln,
        s,
        act,
        row_weight,
        p,
        o,
    })
}

#[inline]
pub(crate) fn pointwise(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Sigmoid => sigmoid_via_tanh(x),
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
        Activation::Softmax => unreachable!("softmax is row-wise"),
    }
}

/// Reverse pass from a cache. Returns the gradient triple and the gradient of
/// the scalar logit bias (sum of logit gradients over visible entries).
pub(crate) fn backward_cached(cache: &AttnCache, v: &Matrix, d_o: &Matrix) -> Result<(GradTriple, f64)> {
    let (n_q, n_k) = cache.s.shape();
    if d_o.shape() != cache.o.shape() {
        return Err(shape_err(
            "attn_backward",
            format!("dO of shape {}x{}", n_q, v.cols()),
            format!("{}x{}", d_o.rows(), d_o.cols()),
        ));
    }
    let cfg = &cache.cfg;
    let dv = mm_tn(&cache.p, d_o);
    let mut dp = mm(d_o, &v.transpose());
    if cfg.alpha != 0.0 {
        for (i, &w) in cache.row_weight.iter().enumerate() {
            dp.row_mut(i).iter_mut().for_each(|x| *x *= w);
        }
    }

    // dS, then scaled in place
    let mut ds = Matrix::zeros(n_q, n_k);
    let mut dbias = 0.0;
    for i in 0..n_q {
        let arow = cache.act.row(i);
        let dprow = dp.row(i);
        let srow = cache.s.row(i);
        let dsrow = ds.row_mut(i);
        match cfg.activation {
            Activation::Softmax => {
                // rowsum(dO ⊙ O)
                let r: f64 = d_o.row(i).iter().zip(cache.o.row(i)).map(|(a, b)| a * b).sum();
                for j in 0..n_k {
                    if cfg.visible(i, j) {
                        dsrow[j] = arow[j] * (dprow[j] - r);
                    }
                }
            }
            Activation::Sigmoid => {
                for j in 0..n_k {
                    if cfg.visible(i, j) {
                        dsrow[j] = sigmoid_grad_from_value(arow[j]) * dprow[j];
                    }
                }
            }
            Activation::Relu => {
                for j in 0..n_k {
                    if cfg.visible(i, j) && srow[j] > 0.0 {
                        dsrow[j] = dprow[j];
                    }
                }
            }
            Activation::Tanh => {
                for j in 0..n_k {
                    if cfg.visible(i, j) {
                        dsrow[j] = (1.0 - arow[j] * arow[j]) * dprow[j];
                    }
                }
            }
        }
        dbias += dsrow.iter().sum::<f64>();
        dsrow.iter_mut().for_each(|x| *x *= cache.scale);
    }

    let mut dq = mm(&ds, &cache.k);
    let mut dk = mm_tn(&ds, &cache.q);
    if let (Some(qc), Some(kc)) = (&cache.q_ln, &cache.k_ln) {
        let d = dq.cols();
        let ones = vec![1.0; d];
        let mut scratch = vec![0.0; d];
        dq = layer_norm_backward(qc, &ones, &dq, &mut scratch, None);
        dk = layer_norm_backward(kc, &ones, &dk, &mut scratch, None);
    }
    let grads = GradTriple { dq, dk, dv };
    if !(grads.dq.is_finite() && grads.dk.is_finite() && grads.dv.is_finite()) {
        return Err(Error::NonFinite("attn_backward"));
    }
    Ok((grads, dbias))
}

/// Reference attention forward pass.
pub fn attn_forward(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttnConfig) -> Result<AttnOutput> {
    let c = forward_cached(q, k, v, cfg, None)?;
    Ok(AttnOutput { o: c.o, p: c.p, s: c.s })
}

/// Analytic gradients of `⟨dO, O⟩` with respect to `q`, `k` and `v`.
pub fn attn_backward(q: &Matrix, k: &Matrix, v: &Matrix, d_o: &Matrix, cfg: &AttnConfig) -> Result<GradTriple> {
    let c = forward_cached(q, k, v, cfg, None)?;
    backward_cached(&c, v, d_o).map(|(g, _)| g)
}
