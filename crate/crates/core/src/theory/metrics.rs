use serde::{Deserialize, Serialize};

use crate::attn::Activation;
use crate::error::{invalid, Result};

/// `(√n − ‖c‖₁/‖c‖₂)/(√n − 1)`: 1 for one-hot vectors, 0 for constant ones.
pub fn hoyer_sparsity(c: &[f64]) -> Result<f64> {
    let n = c.len();
    if n < 2 {
        return Err(invalid(format!("hoyer_sparsity needs at least 2 entries, got {n}")));
    }
    if c.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(invalid("hoyer_sparsity: entries must be finite and >= 0"));
    }
    let l1: f64 = c.iter().sum();
    let l2 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return Err(invalid("hoyer_sparsity: all-zero input"));
    }
    let sn = (n as f64).sqrt();
    Ok(((sn - l1 / l2) / (sn - 1.0)).clamp(0.0, 1.0))
}

/// Forward operations per token per head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopCounts {
    /// Fraction of keys a query sees: `(n+1)/(2n)` causal, 1 otherwise.
    pub c: f64,
    pub logits: f64,
    pub softmax: f64,
    pub sigmoid: f64,
    /// Count for the requested activation.
    pub activation: f64,
    /// Activation overhead relative to the logit product, `1/d_head`.
    pub delta: f64,
}

pub fn flop_count(n_ctx: usize, d_head: usize, causal: bool, activation: Activation) -> Result<FlopCounts> {
    if n_ctx == 0 || d_head == 0 {
        return Err(invalid("flop_count: n_ctx and d_head must be >= 1"));
    }
    let n = n_ctx as f64;
    let c = if causal { (n + 1.0) / (2.0 * n) } else { 1.0 };
    // c·n is a half-integer, so every count below is exact
    let cn = if causal { (n + 1.0) / 2.0 } else { n };
    let softmax = 3.0 * cn;
    let sigmoid = 5.0 * cn;
    Ok(FlopCounts {
        c,
        logits: 2.0 * cn * d_head as f64,
        softmax,
        sigmoid,
        activation: match activation {
            Activation::Softmax => softmax,
            _ => sigmoid,
        },
        delta: 1.0 / d_head as f64,
    })
}
