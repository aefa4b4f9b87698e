//! Pre-LN transformer forward pass and its hand-written reverse pass.
//!
//! Activations of a batch are stacked into `(batch·T) × d` matrices; row
//! `s·T + t` is token `t` of sample `s`. Linear layers act on the stack,
//! attention runs per (sample, head).

use serde::{Deserialize, Serialize};

use crate::attn::{
    apply_rope, backward_cached, forward_cached, layer_norm, layer_norm_backward, rope_backward, AttnCache,
    LayerNormCache, ROPE_BASE,
};
use crate::error::{invalid, shape_err, Result};
use crate::flash::{backward_impl, forward_impl};
use crate::matrix::{mm, mm_nt, mm_tn, Matrix};
use crate::parallel::{map_indexed, Schedule};

use super::config::{InputKind, ModelConfig, PosEncoding};
use super::params::{LayerParams, ModelParams};
use super::tasks::{TaskBatch, TaskKind};

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Fixed sinusoidal position code: `sin(t/10000^{2i/d})` at feature `2i`,
/// `cos` at `2i+1`.
pub fn sincos_position(t: usize, k: usize, d: usize) -> f64 {
    let i = (k / 2) as f64;
    let angle = t as f64 / 10_000f64.powf(2.0 * i / d as f64);
    if k.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub predictions: Vec<f64>,
    /// `attention[l][s·heads + h]` holds the post-activation weights of head
    /// `h` on sample `s` in layer `l`. Empty when the tiled kernels are used,
    /// since they never form these matrices.
    pub attention: Vec<Vec<Matrix>>,
}

/// Loss, gradient and forward products of one batch.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    /// Fraction of correct signs; classification only.
    pub accuracy: Option<f64>,
    pub grads: ModelParams,
    pub output: ForwardOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Mean squared error.
    Mse,
    /// Binary cross-entropy on logits.
    Bce,
}

impl Loss {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Ksum => Loss::Mse,
            TaskKind::PairRepeat => Loss::Bce,
        }
    }
}

/// Mean loss, its gradient with respect to each prediction, and accuracy
/// for [`Loss::Bce`].
pub fn loss_terms(loss: Loss, predictions: &[f64], targets: &[f64]) -> (f64, Vec<f64>, Option<f64>) {
    let b = predictions.len() as f64;
    match loss {
        Loss::Mse => {
            let mut total = 0.0;
            let grad = predictions
                .iter()
                .zip(targets)
                .map(|(&y, &t)| {
                    total += (y - t) * (y - t);
                    2.0 * (y - t) / b
                })
                .collect();
            (total / b, grad, None)
        }
        Loss::Bce => {
            let mut total = 0.0;
            let mut correct = 0usize;
            let grad = predictions
                .iter()
                .zip(targets)
                .map(|(&y, &t)| {
                    total += y.max(0.0) + (-y.abs()).exp().ln_1p() - t * y;
                    if (y > 0.0) == (t > 0.5) {
                        correct += 1;
                    }
                    (crate::ops::sigmoid_via_tanh(y) - t) / b
                })
                .collect();
            (total / b, grad, Some(correct as f64 / b))
        }
    }
}

enum HeadAttn {
    Naive(Box<AttnCache>),
    Flash { q: Matrix, k: Matrix },
}

struct HeadCache {
    q_ln: Option<LayerNormCache>,
    k_ln: Option<LayerNormCache>,
    attn: HeadAttn,
}

struct LayerCache {
    ln1: LayerNormCache,
    a: Matrix,
    v: Matrix,
    heads: Vec<HeadCache>,
    concat: Matrix,
    attn_out: Matrix,
    ln2: LayerNormCache,
    m: Matrix,
    z1: Matrix,
    g: Matrix,
    z2: Matrix,
}

struct Cache {
    batch: usize,
    tokens: usize,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    pooled: Matrix,
}

fn block(m: &Matrix, r0: usize, nr: usize, c0: usize, nc: usize) -> Matrix {
    Matrix::from_fn(nr, nc, |i, j| m.get(r0 + i, c0 + j))
}

fn write_block(m: &mut Matrix, r0: usize, c0: usize, src: &Matrix) {
    for i in 0..src.rows() {
        m.row_mut(r0 + i)[c0..c0 + src.cols()].copy_from_slice(src.row(i));
    }
}

fn add_row(m: &mut Matrix, b: &[f64]) {
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().zip(b).for_each(|(x, &y)| *x += y);
    }
}

fn col_sums_into(m: &Matrix, out: &mut [f64]) {
    for i in 0..m.rows() {
        out.iter_mut().zip(m.row(i)).for_each(|(o, &x)| *o += x);
    }
}

/// `out += aᵀ·b` for stacked activations.
fn acc_tn(out: &mut Matrix, a: &Matrix, b: &Matrix) {
    let prod = mm_tn(a, b);
    out.data_mut().iter_mut().zip(prod.data()).for_each(|(o, &x)| *o += x);
}

/// `x + γ ⊙ branch` with `γ` broadcast over rows, or `x + branch` when
/// LayerScale is off.
fn residual(x: &mut Matrix, gamma: Option<&[f64]>, branch: &Matrix) {
    for i in 0..x.rows() {
        let br = branch.row(i);
        let xr = x.row_mut(i);
        match gamma {
            Some(g) => xr.iter_mut().zip(br).zip(g).for_each(|((x, &b), &g)| *x += g * b),
            None => xr.iter_mut().zip(br).for_each(|(x, &b)| *x += b),
        }
    }
}

/// Gradient into a LayerScale branch; accumulates `dγ` when enabled.
fn residual_backward(dy: &Matrix, gamma: Option<&[f64]>, branch: &Matrix, dgamma: &mut [f64]) -> Matrix {
    let Some(g) = gamma else {
        return dy.clone();
    };
    let mut out = dy.clone();
    for i in 0..dy.rows() {
        let (dr, br) = (dy.row(i), branch.row(i));
        for k in 0..g.len() {
            dgamma[k] += dr[k] * br[k];
        }
        out.row_mut(i).iter_mut().zip(g).for_each(|(x, &g)| *x *= g);
    }
    out
}

fn check_inputs(cfg: &ModelConfig, params: &ModelParams, inputs: &Matrix) -> Result<()> {
    if inputs.rows() == 0 || inputs.cols() == 0 {
        return Err(invalid("model_forward: empty batch"));
    }
    if inputs.cols() > cfg.max_len {
        return Err(shape_err(
            "model_forward",
            format!("at most {} tokens", cfg.max_len),
            format!("{}", inputs.cols()),
        ));
    }
    if params.layers.len() != cfg.layers || params.embed.cols() != cfg.d_model {
        return Err(shape_err(
            "model_forward",
            format!("{} layers of width {}", cfg.layers, cfg.d_model),
            format!("{} layers of width {}", params.layers.len(), params.embed.cols()),
        ));
    }
    if let InputKind::Vocab(v) = cfg.input {
        if let Some(&x) = inputs.data().iter().find(|&&x| !(x >= 0.0 && x < v as f64 && x.fract() == 0.0)) {
            return Err(invalid(format!("model_forward: token {x} outside vocabulary of {v}")));
        }
    }
    Ok(())
}

fn embed(params: &ModelParams, cfg: &ModelConfig, inputs: &Matrix) -> Matrix {
    let (b, t) = inputs.shape();
    let d = cfg.d_model;
    let mut h = Matrix::zeros(b * t, d);
    for s in 0..b {
        for p in 0..t {
            let x = inputs.get(s, p);
            let row = h.row_mut(s * t + p);
            match cfg.input {
                InputKind::Scalar => {
                    row.iter_mut().zip(params.embed.row(0)).for_each(|(o, &w)| *o = x * w);
                }
                InputKind::Vocab(_) => row.copy_from_slice(params.embed.row(x as usize)),
            }
            row.iter_mut().zip(params.embed_b.row(0)).for_each(|(o, &w)| *o += w);
            match cfg.pos {
                PosEncoding::Learnable => row.iter_mut().zip(params.pos.row(p)).for_each(|(o, &w)| *o += w),
                PosEncoding::SinCos => {
                    for (k, o) in row.iter_mut().enumerate() {
                        *o += sincos_position(p, k, d);
                    }
                }
                _ => {}
            }
        }
    }
    h
}

fn learned_bias(cfg: &ModelConfig, layer: &LayerParams) -> Option<f64> {
    cfg.learnable_bias().map(|_| layer.attn_bias.get(0, 0))
}

fn head_forward(
    cfg: &ModelConfig,
    layer: &LayerParams,
    qkv: (&Matrix, &Matrix, &Matrix),
    sample: usize,
    head: usize,
    t: usize,
) -> Result<(HeadCache, Matrix)> {
    let dh = cfg.head_dim();
    let (r0, c0) = (sample * t, head * dh);
    let mut q = block(qkv.0, r0, t, c0, dh);
    let mut k = block(qkv.1, r0, t, c0, dh);
    let v = block(qkv.2, r0, t, c0, dh);
    let (mut q_ln, mut k_ln) = (None, None);
    if cfg.attn.qk_norm {
        let (qn, qc) = layer_norm(&q, layer.qn_g.row(head), None, cfg.attn.qk_norm_eps);
        let (kn, kc) = layer_norm(&k, layer.kn_g.row(head), None, cfg.attn.qk_norm_eps);
        (q, k, q_ln, k_ln) = (qn, kn, Some(qc), Some(kc));
    }
    if cfg.pos == PosEncoding::Rope {
        q = apply_rope(&q, ROPE_BASE)?;
        k = apply_rope(&k, ROPE_BASE)?;
    }
    let hc = cfg.head_cfg(head);
    let bias = learned_bias(cfg, layer);
    let (attn, o) = if cfg.use_flash {
        let (o, _) = forward_impl(&q, &k, &v, &hc, cfg.flash_blocks, Schedule::Sequential, bias)?;
        (HeadAttn::Flash { q, k }, o)
    } else {
        let cache = forward_cached(&q, &k, &v, &hc, bias)?;
        let o = cache.o.clone();
        (HeadAttn::Naive(Box::new(cache)), o)
    };
    Ok((HeadCache { q_ln, k_ln, attn }, o))
}

fn forward_pass(params: &ModelParams, cfg: &ModelConfig, inputs: &Matrix, schedule: Schedule) -> Result<(Vec<f64>, Cache)> {
    cfg.validate()?;
    check_inputs(cfg, params, inputs)?;
    let (b, t) = inputs.shape();
    let (d, nh, dh) = (cfg.d_model, cfg.heads, cfg.head_dim());
    let eps = cfg.ln_eps;
    let ls = cfg.layerscale.is_some();
    let mut h = embed(params, cfg, inputs);
    let mut caches = Vec::with_capacity(cfg.layers);
    for layer in &params.layers {
        let (a, ln1) = layer_norm(&h, layer.ln1_g.row(0), Some(layer.ln1_b.row(0)), eps);
        let q = mm(&a, &layer.wq);
        let k = mm(&a, &layer.wk);
        let v = mm(&a, &layer.wv);
        let heads = map_indexed(b * nh, schedule, |idx| head_forward(cfg, layer, (&q, &k, &v), idx / nh, idx % nh, t))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut concat = Matrix::zeros(b * t, d);
        let mut head_caches = Vec::with_capacity(heads.len());
        for (idx, (hc, o)) in heads.into_iter().enumerate() {
            write_block(&mut concat, (idx / nh) * t, (idx % nh) * dh, &o);
            head_caches.push(hc);
        }
        let attn_out = mm(&concat, &layer.wo);
        residual(&mut h, ls.then(|| layer.gamma_a.row(0)), &attn_out);
        let (m, ln2) = layer_norm(&h, layer.ln2_g.row(0), Some(layer.ln2_b.row(0)), eps);
        let mut z1 = mm(&m, &layer.w1);
        add_row(&mut z1, layer.b1.row(0));
        let g = z1.map(gelu);
        let mut z2 = mm(&g, &layer.w2);
        add_row(&mut z2, layer.b2.row(0));
        residual(&mut h, ls.then(|| layer.gamma_m.row(0)), &z2);
        caches.push(LayerCache {
            ln1,
            a,
            v,
            heads: head_caches,
            concat,
            attn_out,
            ln2,
            m,
            z1,
            g,
            z2,
        });
    }
    let (f, lnf) = layer_norm(&h, params.lnf_g.row(0), Some(params.lnf_b.row(0)), eps);
    let mut pooled = Matrix::zeros(b, d);
    for s in 0..b {
        let row = pooled.row_mut(s);
        for p in 0..t {
            row.iter_mut().zip(f.row(s * t + p)).for_each(|(o, &x)| *o += x);
        }
        row.iter_mut().for_each(|x| *x /= t as f64);
    }
    let hb = params.head_b.get(0, 0);
    let predictions = (0..b)
        .map(|s| pooled.row(s).iter().zip(params.head_w.data()).map(|(x, w)| x * w).sum::<f64>() + hb)
        .collect();
    Ok((
        predictions,
        Cache {
            batch: b,
            tokens: t,
            layers: caches,
            lnf,
            pooled,
        },
    ))
}

fn attention_of(cache: &Cache) -> Vec<Vec<Matrix>> {
    cache
        .layers
        .iter()
        .map(|l| {
            l.heads
                .iter()
                .filter_map(|h| match &h.attn {
                    HeadAttn::Naive(c) => Some(c.p.clone()),
                    HeadAttn::Flash { .. } => None,
                })
                .collect()
        })
        .collect()
}

/// Predictions for each row of `inputs` plus every head's attention matrix.
pub fn model_forward(params: &ModelParams, cfg: &ModelConfig, inputs: &Matrix) -> Result<ForwardOutput> {
    model_forward_with(params, cfg, inputs, Schedule::default())
}

pub fn model_forward_with(
    params: &ModelParams,
    cfg: &ModelConfig,
    inputs: &Matrix,
    schedule: Schedule,
) -> Result<ForwardOutput> {
    let (predictions, cache) = forward_pass(params, cfg, inputs, schedule)?;
    Ok(ForwardOutput {
        predictions,
        attention: attention_of(&cache),
    })
}

struct HeadGrad {
    dq: Matrix,
    dk: Matrix,
    dv: Matrix,
    dbias: f64,
    dqn: Vec<f64>,
    dkn: Vec<f64>,
}

fn head_backward(
    cfg: &ModelConfig,
    layer: &LayerParams,
    lc: &LayerCache,
    dconcat: &Matrix,
    idx: usize,
    t: usize,
) -> Result<HeadGrad> {
    let nh = cfg.heads;
    let dh = cfg.head_dim();
    let (sample, head) = (idx / nh, idx % nh);
    let (r0, c0) = (sample * t, head * dh);
    let d_o = block(dconcat, r0, t, c0, dh);
    let v = block(&lc.v, r0, t, c0, dh);
    let hc = &lc.heads[idx];
    let (g, dbias) = match &hc.attn {
        HeadAttn::Naive(cache) => backward_cached(cache, &v, &d_o)?,
        HeadAttn::Flash { q, k } => {
            let bias = learned_bias(cfg, layer);
            let (g, db, _) = backward_impl(q, k, &v, &d_o, &cfg.head_cfg(head), cfg.flash_blocks, Schedule::Sequential, bias)?;
            (g, db)
        }
    };
    let (mut dq, mut dk) = (g.dq, g.dk);
    if cfg.pos == PosEncoding::Rope {
        dq = rope_backward(&dq, ROPE_BASE)?;
        dk = rope_backward(&dk, ROPE_BASE)?;
    }
    let mut dqn = vec![0.0; dh];
    let mut dkn = vec![0.0; dh];
    if let (Some(qc), Some(kc)) = (&hc.q_ln, &hc.k_ln) {
        dq = layer_norm_backward(qc, layer.qn_g.row(head), &dq, &mut dqn, None);
        dk = layer_norm_backward(kc, layer.kn_g.row(head), &dk, &mut dkn, None);
    }
    Ok(HeadGrad {
        dq,
        dk,
        dv: g.dv,
        dbias,
        dqn,
        dkn,
    })
}

fn backward_pass(
    params: &ModelParams,
    cfg: &ModelConfig,
    inputs: &Matrix,
    cache: &Cache,
    dpred: &[f64],
    schedule: Schedule,
) -> Result<ModelParams> {
    let (b, t) = (cache.batch, cache.tokens);
    let (d, nh, dh) = (cfg.d_model, cfg.heads, cfg.head_dim());
    let ls = cfg.layerscale.is_some();
    let mut grads = params.zeros_like();

    let mut dpooled = Matrix::zeros(b, d);
    for s in 0..b {
        let g = dpred[s];
        grads.head_b.data_mut()[0] += g;
        let pr = cache.pooled.row(s);
        for k in 0..d {
            grads.head_w.data_mut()[k] += pr[k] * g;
        }
        dpooled.row_mut(s).iter_mut().zip(params.head_w.data()).for_each(|(o, &w)| *o = g * w);
    }
    let mut df = Matrix::zeros(b * t, d);
    for s in 0..b {
        for p in 0..t {
            df.row_mut(s * t + p).iter_mut().zip(dpooled.row(s)).for_each(|(o, &x)| *o = x / t as f64);
        }
    }
    let mut dh_ = layer_norm_backward(
        &cache.lnf,
        params.lnf_g.row(0),
        &df,
        grads.lnf_g.data_mut(),
        Some(grads.lnf_b.data_mut()),
    );

    for (l, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let lg = &mut grads.layers[l];

        let dz2 = residual_backward(&dh_, ls.then(|| layer.gamma_m.row(0)), &lc.z2, lg.gamma_m.data_mut());
        acc_tn(&mut lg.w2, &lc.g, &dz2);
        col_sums_into(&dz2, lg.b2.data_mut());
        let mut dz1 = mm_nt(&dz2, &layer.w2);
        dz1.data_mut().iter_mut().zip(lc.z1.data()).for_each(|(g, &z)| *g *= gelu_grad(z));
        acc_tn(&mut lg.w1, &lc.m, &dz1);
        col_sums_into(&dz1, lg.b1.data_mut());
        let dm = mm_nt(&dz1, &layer.w1);
        let dx = layer_norm_backward(&lc.ln2, layer.ln2_g.row(0), &dm, lg.ln2_g.data_mut(), Some(lg.ln2_b.data_mut()));
        dh_.data_mut().iter_mut().zip(dx.data()).for_each(|(o, &x)| *o += x);

        let dattn = residual_backward(&dh_, ls.then(|| layer.gamma_a.row(0)), &lc.attn_out, lg.gamma_a.data_mut());
        acc_tn(&mut lg.wo, &lc.concat, &dattn);
        let dconcat = mm_nt(&dattn, &layer.wo);
        let head_grads = map_indexed(b * nh, schedule, |idx| head_backward(cfg, layer, lc, &dconcat, idx, t))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut dq = Matrix::zeros(b * t, d);
        let mut dk = Matrix::zeros(b * t, d);
        let mut dv = Matrix::zeros(b * t, d);
        for (idx, hg) in head_grads.iter().enumerate() {
            let (r0, head) = ((idx / nh) * t, idx % nh);
            write_block(&mut dq, r0, head * dh, &hg.dq);
            write_block(&mut dk, r0, head * dh, &hg.dk);
            write_block(&mut dv, r0, head * dh, &hg.dv);
            if cfg.learnable_bias().is_some() {
                lg.attn_bias.data_mut()[0] += hg.dbias;
            }
            lg.qn_g.row_mut(head).iter_mut().zip(&hg.dqn).for_each(|(o, &x)| *o += x);
            lg.kn_g.row_mut(head).iter_mut().zip(&hg.dkn).for_each(|(o, &x)| *o += x);
        }
        acc_tn(&mut lg.wq, &lc.a, &dq);
        acc_tn(&mut lg.wk, &lc.a, &dk);
        acc_tn(&mut lg.wv, &lc.a, &dv);
        let mut da = mm_nt(&dq, &layer.wq);
        for (dm, w) in [(&dk, &layer.wk), (&dv, &layer.wv)] {
            let part = mm_nt(dm, w);
            da.data_mut().iter_mut().zip(part.data()).for_each(|(o, &x)| *o += x);
        }
        let dx = layer_norm_backward(&lc.ln1, layer.ln1_g.row(0), &da, lg.ln1_g.data_mut(), Some(lg.ln1_b.data_mut()));
        dh_.data_mut().iter_mut().zip(dx.data()).for_each(|(o, &x)| *o += x);
    }

    for s in 0..b {
        for p in 0..t {
            let g = dh_.row(s * t + p);
            let x = inputs.get(s, p);
            match cfg.input {
                InputKind::Scalar => grads.embed.row_mut(0).iter_mut().zip(g).for_each(|(o, &v)| *o += x * v),
                InputKind::Vocab(_) => grads.embed.row_mut(x as usize).iter_mut().zip(g).for_each(|(o, &v)| *o += v),
            }
            grads.embed_b.row_mut(0).iter_mut().zip(g).for_each(|(o, &v)| *o += v);
            if cfg.pos == PosEncoding::Learnable {
                grads.pos.row_mut(p).iter_mut().zip(g).for_each(|(o, &v)| *o += v);
            }
        }
    }
    Ok(grads)
}

/// Loss of `batch` under the task's loss and its gradient with respect to
/// every parameter.
pub fn loss_and_grad(params: &ModelParams, cfg: &ModelConfig, batch: &TaskBatch, schedule: Schedule) -> Result<LossGrad> {
    if batch.inputs.rows() != batch.targets.len() {
        return Err(shape_err(
            "loss_and_grad",
            format!("{} targets", batch.inputs.rows()),
            format!("{}", batch.targets.len()),
        ));
    }
    let (predictions, cache) = forward_pass(params, cfg, &batch.inputs, schedule)?;
    let (loss, dpred, accuracy) = loss_terms(Loss::for_task(batch.kind), &predictions, &batch.targets);
    let grads = backward_pass(params, cfg, &batch.inputs, &cache, &dpred, schedule)?;
    Ok(LossGrad {
        loss,
        accuracy,
        grads,
        output: ForwardOutput {
            predictions,
            attention: attention_of(&cache),
        },
    })
}
