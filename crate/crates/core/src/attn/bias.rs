use crate::error::{invalid, Result};
use crate::matrix::Matrix;

use super::config::{AttnConfig, BiasMode, PosBias};

/// Ratio between the slope applied to keys after the query and keys before
/// it in the non-causal (encoder) ALiBi variant.
pub const ALIBI_FUTURE_SLOPE_RATIO: f64 = 0.5;

/// Per-row logit offset. `row_lengths[i]` is the number of visible keys of
/// row `i`; only [`BiasMode::NegLogRowLen`] reads it.
pub fn logit_bias(cfg: &AttnConfig, n: usize, row_lengths: &[usize]) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("logit_bias: n must be >= 1"));
    }
    row_lengths
        .iter()
        .map(|&len| {
            Ok(match cfg.bias {
                BiasMode::None => 0.0,
                BiasMode::Constant(b) | BiasMode::Learnable(b) => b,
                BiasMode::NegLogN => -(n as f64).ln(),
                BiasMode::NegLogRowLen => {
                    if len == 0 {
                        return Err(invalid("logit_bias: empty row"));
                    }
                    -(len as f64).ln()
                }
            })
        })
        .collect()
}

/// Visible key count of every query row.
pub fn row_lengths(cfg: &AttnConfig, n_q: usize, n_k: usize) -> Vec<usize> {
    (0..n_q).map(|i| cfg.row_len(i, n_k)).collect()
}

/// Geometric ALiBi slope `2^(−8(h+1)/H)`.
pub fn alibi_slope(head: usize, num_heads: usize) -> f64 {
    (2f64).powf(-8.0 * (head as f64 + 1.0) / num_heads as f64)
}

/// Single ALiBi entry; kernels call this per element instead of building the
/// whole matrix.
#[inline]
pub fn alibi_entry(i: usize, j: usize, slope: f64, causal: bool) -> f64 {
    if j <= i {
        -slope * (i - j) as f64
    } else if causal {
        0.0
    } else {
        -slope * ALIBI_FUTURE_SLOPE_RATIO * (j - i) as f64
    }
}

pub fn alibi_bias(n: usize, head: usize, num_heads: usize, causal: bool) -> Result<Matrix> {
    if head >= num_heads {
        return Err(invalid(format!("alibi head {head} out of range for {num_heads} heads")));
    }
    let m = alibi_slope(head, num_heads);
    Ok(Matrix::from_fn(n, n, |i, j| alibi_entry(i, j, m, causal)))
}

pub(crate) fn alibi_slope_of(cfg: &AttnConfig) -> Option<f64> {
    match cfg.pos_bias {
        PosBias::None => None,
        PosBias::Alibi { num_heads, head } => Some(alibi_slope(head, num_heads)),
    }
}

/// Row multiplier `(1/nᵢ)^α` with `nᵢ` the visible length of row `i`.
#[inline]
pub fn seq_norm_factor(row_len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        1.0
    } else {
        (1.0 / row_len as f64).powf(alpha)
    }
}

pub fn seq_norm_weights(n: usize, alpha: f64, causal: bool) -> Matrix {
    Matrix::from_fn(n, n, |i, _| seq_norm_factor(if causal { i + 1 } else { n }, alpha))
}
