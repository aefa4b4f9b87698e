use serde::{Deserialize, Serialize};

use crate::attn::{Activation, AttnConfig, BiasMode};
use crate::error::{invalid, Result};
use crate::flash::BlockSpec;

/// How tokens enter the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Each token is a real scalar, projected to the model width.
    Scalar,
    /// Each token is a symbol in `0..vocab`, looked up in a table.
    Vocab(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    None,
    Learnable,
    SinCos,
    Rope,
    Alibi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: InputKind,
    pub max_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// Activation, bias, α, causal flag, QK norm and logit scale of every
    /// head. Positional bias is set from `pos`.
    pub attn: AttnConfig,
    pub pos: PosEncoding,
    /// LayerScale initial gain; `None` disables LayerScale (gain fixed at 1).
    pub layerscale: Option<f64>,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Run sigmoid heads through the tiled kernels.
    pub use_flash: bool,
    pub flash_blocks: BlockSpec,
}

impl ModelConfig {
    pub fn new(input: InputKind, max_len: usize) -> Self {
        Self {
            input,
            max_len,
            d_model: 64,
            heads: 4,
            layers: 1,
            mlp_ratio: 4,
            attn: AttnConfig::sigmoid(),
            pos: PosEncoding::Learnable,
            layerscale: None,
            ln_eps: 1e-5,
            init_std: 0.02,
            use_flash: false,
            flash_blocks: BlockSpec::default(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn learnable_bias(&self) -> Option<f64> {
        match self.attn.bias {
            BiasMode::Learnable(b) => Some(b),
            _ => None,
        }
    }

    /// Attention config of head `h`.
    pub(crate) fn head_cfg(&self, h: usize) -> AttnConfig {
        let mut c = self.attn;
        c.qk_norm = false;
        if self.pos == PosEncoding::Alibi {
            c = c.with_alibi(self.heads, h);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 || self.mlp_ratio == 0 || self.max_len == 0 {
            return Err(invalid("model dimensions must be >= 1"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.pos == PosEncoding::Rope && !self.head_dim().is_multiple_of(2) {
            return Err(invalid("RoPE needs an even head dimension"));
        }
        if self.pos == PosEncoding::SinCos && !self.d_model.is_multiple_of(2) {
            return Err(invalid("sinusoidal positions need an even model width"));
        }
        if let InputKind::Vocab(0) = self.input {
            return Err(invalid("vocabulary must be non-empty"));
        }
        if self.use_flash && (self.attn.activation != Activation::Sigmoid || self.attn.alpha != 0.0) {
            return Err(invalid("tiled attention needs sigmoid activation and alpha = 0"));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(invalid("ln_eps must be > 0 and init_std >= 0"));
        }
        self.flash_blocks.validate()
    }
}
