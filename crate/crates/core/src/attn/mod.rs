//! Reference attention: softmax, sigmoid and the ablation activations with
//! bias, sequence-length normalization, causal masking, ALiBi, QK norm and
//! RoPE.

mod bias;
mod config;
mod multihead;
mod posenc;
mod reference;

pub use bias::{
    alibi_bias, alibi_entry, alibi_slope, logit_bias, row_lengths, seq_norm_factor, seq_norm_weights,
    ALIBI_FUTURE_SLOPE_RATIO,
};
pub use config::{Activation, AttnConfig, BiasMode, PosBias};
pub use multihead::{multihead_attn, HeadWeights};
pub use posenc::{apply_rope, layer_norm, layer_norm_backward, qk_normalize, rope_backward, LayerNormCache, ROPE_BASE};
pub use reference::{attn_backward, attn_forward, AttnOutput, GradTriple};

pub(crate) use bias::alibi_slope_of;
pub(crate) use reference::{alibi_term, backward_cached, check_shapes, finish_logit, forward_cached, AttnCache};
