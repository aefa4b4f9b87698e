//! A small pre-LN transformer with a hand-written backward pass, the
//! k-summation and pair-repeat tasks, Adam and a training loop that records
//! attention norms and sparsity.
//!
//! Blocks compute `x += γₐ ⊙ MHA(LN(x))` then `x += γₘ ⊙ MLP(LN(x))`, and the
//! readout is linear on the mean-pooled final LayerNorm output. A k-summation
//! input of `n` values and `n` mask bits is fed as `2n` scalar tokens.

mod config;
mod io;
mod mlp;
mod model;
mod optim;
mod params;
mod tasks;
mod train;

pub use config::{InputKind, ModelConfig, PosEncoding};
pub use io::{load_params, params_from_bytes, params_to_bytes, save_params, ParamManifest, TensorEntry};
pub use mlp::{
    matched_width, mlp_features, mlp_input_dim, mlp_loss_and_grad, mlp_predict, mlp_scalars, train_mlp,
    write_mlp_metrics_csv, MlpParams, MlpRecord, MlpTrainResult, KSUM_MLP_HIDDEN, MLP_METRICS_HEADER,
};
pub use model::{
    gelu, gelu_grad, loss_and_grad, loss_terms, model_forward, model_forward_with, sincos_position, ForwardOutput,
    Loss, LossGrad,
};
pub use optim::{adam_step, adam_update, AdamConfig, AdamState};
pub use params::{LayerParams, ModelParams};
pub use tasks::{gen_ksum, gen_pair_repeat, ksum_target, pair_repeat_label, TaskBatch, TaskKind};
pub use train::{
    attention_metrics, eval_length_generalization, evaluate, metrics_csv_header, train, write_metrics_csv, EvalPoint,
    LengthAccuracy, LrSchedule, MetricsRecord, TaskSpec, TrainConfig, TrainResult,
};
