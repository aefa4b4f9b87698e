//! Central-difference checks of the analytic backward passes, swept over the
//! configuration axes.

use serde::{Deserialize, Serialize};

use crate::attn::{attn_backward, attn_forward, Activation, AttnConfig, BiasMode, GradTriple};
use crate::error::Result;
use crate::flash::{flash_backward, flash_forward, BlockSpec};
use crate::matrix::Matrix;
use crate::nn::{loss_and_grad, InputKind, ModelConfig, ModelParams, PosEncoding, TaskBatch, TaskKind};
use crate::parallel::Schedule;
use crate::rng::{rng_normal, Rng};

/// Tolerance for attention-only gradients at the default step.
pub const ATTN_GRAD_TOL: f64 = 1e-6;
/// Tolerance for full-model gradients at the default step.
pub const MODEL_GRAD_TOL: f64 = 1e-5;
pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Magnitude below which gradient entries are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Tolerance for step `h` when truncation error grows as `h^order`.
pub fn tolerance_for_step(base: f64, h: f64, order: i32) -> f64 {
    base * (h / DEFAULT_FD_STEP).powi(order).max(1.0)
}

/// Central differences at steps `h` and `h/2` combined by Richardson
/// extrapolation, cancelling the `h²` truncation term. Used for the full
/// model, where LayerNorm over a few channels makes that term large.
pub fn richardson_diff(x0: f64, h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let wide = (f(x0 + h)? - f(x0 - h)?) / (2.0 * h);
    let narrow = (f(x0 + h / 2.0)? - f(x0 - h / 2.0)?) / h;
    Ok((4.0 * narrow - wide) / 3.0)
}

fn worst_over(analytic: &Matrix, x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> Result<f64>) -> Result<f64> {
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric, REL_ERR_FLOOR));
    }
    Ok(worst)
}

/// Worst relative error of `∂⟨dO, O⟩/∂{Q,K,V}` against central differences,
/// through the reference kernels or, with `blocks`, the tiled ones.
pub fn attention_grad_error(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    cfg: &AttnConfig,
    h: f64,
    blocks: Option<BlockSpec>,
) -> Result<f64> {
    let out = |q: &Matrix, k: &Matrix, v: &Matrix| -> Result<f64> {
        let o = match blocks {
            Some(b) => flash_forward(q, k, v, cfg, b)?.0,
            None => attn_forward(q, k, v, cfg)?.o,
        };
        Ok(o.data().iter().zip(d_o.data()).map(|(a, b)| a * b).sum())
    };
    let g: GradTriple = match blocks {
        Some(b) => flash_backward(q, k, v, d_o, cfg, b)?.0,
        None => attn_backward(q, k, v, d_o, cfg)?,
    };
    let eq = worst_over(&g.dq, q, h, |p| out(p, k, v))?;
    let ek = worst_over(&g.dk, k, h, |p| out(q, p, v))?;
    let ev = worst_over(&g.dv, v, h, |p| out(q, k, p))?;
    Ok(eq.max(ek).max(ev))
}

/// Worst relative error of the model's loss gradient over every parameter,
/// against extrapolated central differences.
pub fn model_grad_error(params: &ModelParams, cfg: &ModelConfig, batch: &TaskBatch, h: f64) -> Result<f64> {
    let analytic = loss_and_grad(params, cfg, batch, Schedule::Sequential)?.grads;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let count = params.tensors().len();
    for ti in 0..count {
        let a = analytic.tensors()[ti].1.clone();
        for i in 0..a.len() {
            let orig = probe.tensors_mut()[ti].data()[i];
            let numeric = richardson_diff(orig, h, |x| {
                probe.tensors_mut()[ti].data_mut()[i] = x;
                Ok(loss_and_grad(&probe, cfg, batch, Schedule::Sequential)?.loss)
            })?;
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            worst = worst.max(rel_err(a.data()[i], numeric, REL_ERR_FLOOR));
        }
    }
    Ok(worst)
}

fn bias_modes() -> [(&'static str, BiasMode); 5] {
    [
        ("none", BiasMode::None),
        ("const", BiasMode::Constant(-2.0)),
        ("neg_log_n", BiasMode::NegLogN),
        ("neg_log_row_len", BiasMode::NegLogRowLen),
        ("learnable", BiasMode::Learnable(-1.0)),
    ]
}

/// Attention configs for `activation`, one axis changed at a time. Sigmoid
/// axes without sequence normalization are also run through the tiled
/// kernels (`true` in the last field).
pub fn attention_axes(activation: Activation) -> Vec<(String, AttnConfig, bool)> {
    let base = AttnConfig {
        activation,
        ..AttnConfig::sigmoid()
    };
    let name = format!("{activation:?}").to_lowercase();
    let mut axes = vec![
        (name.clone(), base),
        (format!("{name} causal"), base.with_causal(true)),
        (format!("{name} alpha=1"), base.with_alpha(1.0)),
        (format!("{name} alpha=1 causal"), base.with_alpha(1.0).with_causal(true)),
        (format!("{name} qk_norm"), base.with_qk_norm(true)),
        (format!("{name} alibi"), base.with_alibi(4, 1)),
        (format!("{name} alibi causal"), base.with_alibi(4, 2).with_causal(true)),
    ];
    if activation == Activation::Sigmoid {
        for (b, mode) in bias_modes() {
            axes.push((format!("{name} bias {b}"), base.with_bias(mode)));
            axes.push((format!("{name} causal bias {b}"), base.with_causal(true).with_bias(mode)));
        }
    }
    if activation == Activation::Softmax {
        for a in &mut axes {
            a.0 = a.0.replacen("softmax", "softmax rowsum(dO*O)", 1);
        }
    }
    let mut out = Vec::with_capacity(axes.len() * 2);
    for (n, c) in axes {
        let flash = activation == Activation::Sigmoid && c.alpha == 0.0 && !c.qk_norm;
        out.push((n.clone(), c, false));
        if flash {
            out.push((format!("{n} [tiled]"), c, true));
        }
    }
    out
}

/// Two-token, width-4, one-layer model configs with one axis changed at a
/// time from a sigmoid / learnable-bias / learnable-position base.
pub fn model_axes(activation: Option<Activation>) -> Vec<(String, ModelConfig)> {
    let mut base = ModelConfig::new(InputKind::Scalar, 2);
    base.d_model = 4;
    base.heads = 2;
    base.mlp_ratio = 2;
    base.init_std = 0.5;
    base.attn = AttnConfig::sigmoid().with_bias(BiasMode::Learnable(-1.0));
    let acts: Vec<Activation> = match activation {
        Some(a) => vec![a],
        None => vec![Activation::Sigmoid, Activation::Softmax],
    };
    let mut out = Vec::new();
    for act in acts {
        let mut b = base.clone();
        b.attn.activation = act;
        if act != Activation::Sigmoid {
            b.attn.bias = BiasMode::None;
        }
        let tag = format!("{act:?}").to_lowercase();
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = b.clone();
            f(&mut c);
            c
        };
        out.push((format!("model {tag}"), b.clone()));
        out.push((format!("model {tag} qk_norm"), with(&|c| c.attn.qk_norm = true)));
        out.push((format!("model {tag} layerscale"), with(&|c| c.layerscale = Some(0.5))));
        for (name, pos) in [
            ("alibi", PosEncoding::Alibi),
            ("rope", PosEncoding::Rope),
            ("sincos", PosEncoding::SinCos),
            ("no positions", PosEncoding::None),
        ] {
            out.push((format!("model {tag} {name}"), with(&|c| c.pos = pos)));
        }
        out.push((format!("model {tag} causal"), with(&|c| c.attn.causal = true)));
        out.push((format!("model {tag} alpha=1"), with(&|c| c.attn.alpha = 1.0)));
        out.push((format!("model {tag} two layers"), with(&|c| c.layers = 2)));
        out.push((format!("model {tag} vocab input"), with(&|c| c.input = InputKind::Vocab(3))));
        if act == Activation::Sigmoid {
            for (name, mode) in bias_modes() {
                out.push((format!("model {tag} bias {name}"), with(&|c| c.attn.bias = mode)));
            }
            out.push((format!("model {tag} tiled"), with(&|c| c.use_flash = true)));
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub axis: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Restrict the sweep to one activation.
    pub activation: Option<Activation>,
    pub h: f64,
    /// Overrides the step-scaled default tolerances.
    pub tol: Option<f64>,
    pub n: usize,
    pub d: usize,
    pub include_model: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            activation: None,
            h: DEFAULT_FD_STEP,
            tol: None,
            n: 6,
            d: 4,
            include_model: true,
            seed: 0,
        }
    }
}

/// Runs every axis and reports the worst relative error of each.
pub fn checkgrad_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckRow>> {
    let acts = match opts.activation {
        Some(a) => vec![a],
        None => vec![Activation::Sigmoid, Activation::Softmax, Activation::Relu, Activation::Tanh],
    };
    let mut rng = Rng::new(opts.seed);
    let (n, d) = (opts.n, opts.d);
    let q = rng_normal(&mut rng, n, d, 0.0, 1.0, None);
    let k = rng_normal(&mut rng, n, d, 0.0, 1.0, None);
    let v = rng_normal(&mut rng, n, d, 0.0, 1.0, None);
    let d_o = rng_normal(&mut rng, n, d, 0.0, 1.0, None);
    let attn_tol = opts.tol.unwrap_or_else(|| tolerance_for_step(ATTN_GRAD_TOL, opts.h, 2));
    let model_tol = opts.tol.unwrap_or_else(|| tolerance_for_step(MODEL_GRAD_TOL, opts.h, 4));
    let blocks = BlockSpec::new(4, 3)?;
    let mut rows = Vec::new();
    for &act in &acts {
        for (axis, cfg, tiled) in attention_axes(act) {
            let err = attention_grad_error(&q, &k, &v, &d_o, &cfg, opts.h, tiled.then_some(blocks))?;
            rows.push(GradCheckRow {
                axis,
                worst_rel_err: err,
                tolerance: attn_tol,
                pass: err <= attn_tol,
            });
        }
    }
    if opts.include_model {
        let model_acts = opts.activation.filter(|a| matches!(a, Activation::Sigmoid | Activation::Softmax));
        if opts.activation.is_none() || model_acts.is_some() {
            for (axis, cfg) in model_axes(model_acts) {
                let mut r = rng.fork(rows.len() as u64);
                let params = ModelParams::init(&cfg, &mut r)?;
                let batch = match cfg.input {
                    InputKind::Scalar => TaskBatch {
                        kind: TaskKind::Ksum,
                        inputs: rng_normal(&mut r, 2, cfg.max_len, 0.0, 1.0, None),
                        targets: vec![0.7, -1.3],
                    },
                    InputKind::Vocab(v) => TaskBatch {
                        kind: TaskKind::PairRepeat,
                        inputs: Matrix::from_fn(2, cfg.max_len, |_, _| r.below(v) as f64),
                        targets: vec![1.0, 0.0],
                    },
                };
                let err = model_grad_error(&params, &cfg, &batch, opts.h)?;
                rows.push(GradCheckRow {
                    axis,
                    worst_rel_err: err,
                    tolerance: model_tol,
                    pass: err <= model_tol,
                });
            }
        }
    }
    Ok(rows)
}
