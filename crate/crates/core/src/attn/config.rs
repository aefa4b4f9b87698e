use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softmax,
    Sigmoid,
    Relu,
    Tanh,
}

/// Scalar added to every logit of a row before the activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    None,
    Constant(f64),
    /// `b = −ln n` with `n` the key length.
    NegLogN,
    /// `bᵢ = −ln nᵢ` with `nᵢ` the number of visible keys in row `i`.
    NegLogRowLen,
    /// Trainable scalar; the reference kernels use its initial value.
    Learnable(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosBias {
    None,
    Alibi { num_heads: usize, head: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub activation: Activation,
    pub bias: BiasMode,
    /// Sequence-length normalization exponent; `0` disables it.
    pub alpha: f64,
    pub causal: bool,
    pub pos_bias: PosBias,
    /// Logit scale; `None` means `1/√d_qk`.
    pub scale: Option<f64>,
    pub qk_norm: bool,
    pub qk_norm_eps: f64,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            activation: Activation::Sigmoid,
            bias: BiasMode::None,
            alpha: 0.0,
            causal: false,
            pos_bias: PosBias::None,
            scale: None,
            qk_norm: false,
            qk_norm_eps: 1e-6,
        }
    }
}

impl AttnConfig {
    pub fn sigmoid() -> Self {
        Self::default()
    }

    pub fn softmax() -> Self {
        Self {
            activation: Activation::Softmax,
            ..Self::default()
        }
    }

    pub fn with_bias(mut self, bias: BiasMode) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_alibi(mut self, num_heads: usize, head: usize) -> Self {
        self.pos_bias = PosBias::Alibi { num_heads, head };
        self
    }

    pub fn with_qk_norm(mut self, on: bool) -> Self {
        self.qk_norm = on;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = Some(scale);
        self
    }

    pub fn scale_for(&self, d_qk: usize) -> f64 {
        self.scale.unwrap_or_else(|| 1.0 / (d_qk as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.bias != BiasMode::None && self.activation != Activation::Sigmoid {
            return Err(Error::Unsupported(format!(
                "bias mode {:?} requires sigmoid activation, got {:?}",
                self.bias, self.activation
            )));
        }
        if let BiasMode::Constant(b) | BiasMode::Learnable(b) = self.bias {
            if !b.is_finite() {
                return Err(invalid("bias must be finite"));
            }
        }
        if let PosBias::Alibi { num_heads, head } = self.pos_bias {
            if num_heads == 0 || head >= num_heads {
                return Err(invalid(format!("alibi head {head} out of range for {num_heads} heads")));
            }
        }
        if !(self.qk_norm_eps > 0.0) {
            return Err(invalid("qk_norm_eps must be > 0"));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn visible(&self, i: usize, j: usize) -> bool {
        !self.causal || j <= i
    }

    #[inline]
    pub(crate) fn row_len(&self, i: usize, n_k: usize) -> usize {
        if self.causal {
            (i + 1).min(n_k)
        } else {
            n_k
        }
    }
}
