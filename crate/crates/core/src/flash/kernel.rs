use serde::{Deserialize, Serialize};

use crate::attn::{alibi_slope_of, alibi_term, check_shapes, finish_logit, Activation, AttnConfig, BiasMode, GradTriple};
use crate::error::{invalid, shape_err, Error, Result};
use crate::matrix::{gemm_acc, gemm_tn_acc, transpose_into, Matrix};
use crate::ops::{sigmoid_grad_from_value, sigmoid_via_tanh};
use crate::parallel::{for_each_chunk_mut, for_each_chunk_pair_mut, Schedule};

use super::memory::{AuxTracker, MemReport};

/// Tile shape: `b_r` query rows by `b_c` key/value rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub b_r: usize,
    pub b_c: usize,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self { b_r: 128, b_c: 128 }
    }
}

impl BlockSpec {
    pub fn new(b_r: usize, b_c: usize) -> Result<Self> {
        let b = Self { b_r, b_c };
        b.validate()?;
        Ok(b)
    }

    /// Narrower key blocks, trading fewer live logits for more `dQ` updates.
    pub fn narrow() -> Self {
        Self { b_r: 128, b_c: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_r == 0 || self.b_c == 0 {
            return Err(invalid(format!("block sizes must be >= 1, got ({}, {})", self.b_r, self.b_c)));
        }
        Ok(())
    }
}

/// Per-call constants shared by every tile.
struct Plan {
    causal: bool,
    scale: f64,
    slope: Option<f64>,
    bias: BiasMode,
    bias_override: Option<f64>,
    n_q: usize,
    n_k: usize,
    d: usize,
    dv: usize,
    br: usize,
    bc: usize,
}

impl Plan {
    fn new(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttnConfig, blocks: BlockSpec, bias: Option<f64>) -> Result<Self> {
        cfg.validate()?;
        blocks.validate()?;
        if cfg.activation != Activation::Sigmoid {
            return Err(Error::Unsupported(format!("tiled kernel needs sigmoid, got {:?}", cfg.activation)));
        }
        if cfg.alpha != 0.0 {
            return Err(Error::Unsupported("tiled kernel needs alpha = 0".into()));
        }
        if cfg.qk_norm {
            return Err(Error::Unsupported("tiled kernel expects pre-normalized queries and keys".into()));
        }
        check_shapes(q, k, v, cfg)?;
        if let Some(b) = bias {
            if !b.is_finite() {
                return Err(invalid("bias must be finite"));
            }
        }
        Ok(Self {
            causal: cfg.causal,
            scale: cfg.scale_for(q.cols()),
            slope: alibi_slope_of(cfg),
            bias: cfg.bias,
            bias_override: bias,
            n_q: q.rows(),
            n_k: k.rows(),
            d: q.cols(),
            dv: v.cols(),
            br: blocks.b_r.min(q.rows()),
            bc: blocks.b_c.min(k.rows()),
        })
    }

    fn row_blocks(&self) -> usize {
        self.n_q.div_ceil(self.br)
    }

    fn col_blocks(&self) -> usize {
        self.n_k.div_ceil(self.bc)
    }

    fn rows(&self, bi: usize) -> (usize, usize) {
        let r0 = bi * self.br;
        (r0, (r0 + self.br).min(self.n_q))
    }

    fn cols(&self, bj: usize) -> (usize, usize) {
        let c0 = bj * self.bc;
        (c0, (c0 + self.bc).min(self.n_k))
    }

    /// Every entry of the tile lies above the diagonal.
    fn fully_masked(&self, (_, r1): (usize, usize), (c0, _): (usize, usize)) -> bool {
        self.causal && c0 > r1 - 1
    }

    /// Must agree bit for bit with `attn::logit_bias`.
    fn row_bias(&self, i: usize) -> f64 {
        if let Some(b) = self.bias_override {
            return b;
        }
        match self.bias {
            BiasMode::None => 0.0,
            BiasMode::Constant(b) | BiasMode::Learnable(b) => b,
            BiasMode::NegLogN => -(self.n_k as f64).ln(),
            BiasMode::NegLogRowLen => {
                let len = if self.causal { (i + 1).min(self.n_k) } else { self.n_k };
                -(len as f64).ln()
            }
        }
    }

    fn tile(&self) -> usize {
        self.br * self.bc
    }

    /// Loads `K_j` (and optionally `V_j`) transposed into scratch.
    fn load_transposed(&self, src: &Matrix, (c0, c1): (usize, usize), dst: &mut [f64]) {
        let w = src.cols();
        transpose_into(&src.data()[c0 * w..c1 * w], c1 - c0, w, &mut dst[..w * (c1 - c0)]);
    }

    /// Fills `p` (rows × cols, stride cols) with masked sigmoid weights.
    fn probabilities(&self, q: &Matrix, kt: &[f64], rows: (usize, usize), cols: (usize, usize), p: &mut [f64]) {
        let (r0, r1) = rows;
        let (c0, c1) = cols;
        let (m, w) = (r1 - r0, c1 - c0);
        let p = &mut p[..m * w];
        p.iter_mut().for_each(|x| *x = 0.0);
        gemm_acc(&q.data()[r0 * self.d..r1 * self.d], &kt[..self.d * w], p, m, self.d, w);
        for (li, row) in p.chunks_mut(w).enumerate() {
            let i = r0 + li;
            let rb = self.row_bias(i);
            for (lj, x) in row.iter_mut().enumerate() {
                let j = c0 + lj;
                *x = if !self.causal || j <= i {
                    sigmoid_via_tanh(finish_logit(*x, self.scale, rb, alibi_term(self.slope, i, j, self.causal)))
                } else {
                    0.0
                };
            }
        }
    }

    /// Turns `dP` into `scale·dS` in place and returns the unscaled sum
    /// (the scalar-bias gradient contribution).
    fn pre_activation_grad(&self, p: &[f64], dp: &mut [f64], rows: (usize, usize), cols: (usize, usize)) -> f64 {
        let w = cols.1 - cols.0;
        let m = rows.1 - rows.0;
        let mut sum = 0.0;
        for (li, (drow, prow)) in dp[..m * w].chunks_mut(w).zip(p.chunks(w)).enumerate() {
            let i = rows.0 + li;
            for (lj, (x, &pv)) in drow.iter_mut().zip(prow).enumerate() {
                let j = cols.0 + lj;
                *x = if !self.causal || j <= i { sigmoid_grad_from_value(pv) * *x } else { 0.0 };
            }
            sum += drow.iter().sum::<f64>();
            drow.iter_mut().for_each(|x| *x *= self.scale);
        }
        sum
    }
}

fn is_zero(block: &[f64]) -> bool {
    block.iter().all(|&x| x == 0.0)
}

/// Tiled sigmoid attention forward pass on the default schedule.
pub fn flash_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttnConfig,
    blocks: BlockSpec,
) -> Result<(Matrix, MemReport)> {
    flash_forward_with(q, k, v, cfg, blocks, Schedule::default())
}

pub fn flash_forward_with(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttnConfig,
    blocks: BlockSpec,
    schedule: Schedule,
) -> Result<(Matrix, MemReport)> {
    forward_impl(q, k, v, cfg, blocks, schedule, None)
}

pub(crate) fn forward_impl(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttnConfig,
    blocks: BlockSpec,
    schedule: Schedule,
    bias: Option<f64>,
) -> Result<(Matrix, MemReport)> {
    let plan = Plan::new(q, k, v, cfg, blocks, bias)?;
    let tracker = AuxTracker::new();
    let mut o = Matrix::zeros(plan.n_q, plan.dv);
    let dv = plan.dv;
    for_each_chunk_mut(o.data_mut(), plan.br * dv, schedule, |bi, o_i| {
        let rows = plan.rows(bi);
        let m = rows.1 - rows.0;
        let mut kt = tracker.alloc(plan.d * plan.bc);
        let mut p = tracker.alloc_logits(plan.tile());
        for bj in 0..plan.col_blocks() {
            let cols = plan.cols(bj);
            if plan.fully_masked(rows, cols) {
                tracker.block_skipped();
                continue;
            }
            let w = cols.1 - cols.0;
            tracker.block_computed(m * w);
            plan.load_transposed(k, cols, &mut kt);
            plan.probabilities(q, &kt, rows, cols, &mut p);
            gemm_acc(&p[..m * w], &v.data()[cols.0 * dv..cols.1 * dv], o_i, m, w, dv);
        }
    });
    if !o.is_finite() {
        return Err(Error::NonFinite("flash_forward"));
    }
    Ok((o, tracker.report(plan.n_q, plan.n_k)))
}

/// Tiled sigmoid attention backward pass on the default schedule. `O` is not
/// needed: attention weights are recomputed tile by tile.
pub fn flash_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    cfg: &AttnConfig,
    blocks: BlockSpec,
) -> Result<(GradTriple, MemReport)> {
    flash_backward_with(q, k, v, d_o, cfg, blocks, Schedule::default())
}

pub fn flash_backward_with(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    cfg: &AttnConfig,
    blocks: BlockSpec,
    schedule: Schedule,
) -> Result<(GradTriple, MemReport)> {
    backward_impl(q, k, v, d_o, cfg, blocks, schedule, None).map(|(g, _, m)| (g, m))
}

/// Returns the gradient triple, the scalar-bias gradient and the report.
///
/// Sequential: key blocks outer, query blocks inner, `dQ_i` updated in place
/// on every visit. Parallel: one pass over key blocks producing `dK_j, dV_j`,
/// then one pass over query blocks producing `dQ_i` with key blocks ascending.
/// Each output element sees the same additions in the same order either way.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_impl(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    cfg: &AttnConfig,
    blocks: BlockSpec,
    schedule: Schedule,
    bias: Option<f64>,
) -> Result<(GradTriple, f64, MemReport)> {
    let plan = Plan::new(q, k, v, cfg, blocks, bias)?;
    if d_o.shape() != (plan.n_q, plan.dv) {
        return Err(shape_err(
            "flash_backward",
            format!("dO of shape {}x{}", plan.n_q, plan.dv),
            format!("{}x{}", d_o.rows(), d_o.cols()),
        ));
    }
    let tracker = AuxTracker::new();
    let mut dq = Matrix::zeros(plan.n_q, plan.d);
    let mut dk = Matrix::zeros(plan.n_k, plan.d);
    let mut dvm = Matrix::zeros(plan.n_k, plan.dv);
    let dbias = match schedule {
        Schedule::Sequential => backward_sequential(&plan, q, k, v, d_o, &tracker, &mut dq, &mut dk, &mut dvm),
        Schedule::Parallel => backward_two_pass(&plan, q, k, v, d_o, &tracker, &mut dq, &mut dk, &mut dvm, schedule),
    };
    let grads = GradTriple { dq, dk, dv: dvm };
    if !(grads.dq.is_finite() && grads.dk.is_finite() && grads.dv.is_finite()) {
        return Err(Error::NonFinite("flash_backward"));
    }
    Ok((grads, dbias, tracker.report(plan.n_q, plan.n_k)))
}

/// Work on one `(i, j)` tile given loaded `K_jᵀ`, `V_jᵀ`. Leaves `scale·dS`
/// in `ds` and `P` in `p`; returns the unscaled `dS` sum.
#[allow(clippy::too_many_arguments)]
fn tile_grads(
    plan: &Plan,
    q: &Matrix,
    d_o: &Matrix,
    kt: &[f64],
    vt: &[f64],
    rows: (usize, usize),
    cols: (usize, usize),
    p: &mut [f64],
    ds: &mut [f64],
) -> f64 {
    let (m, w) = (rows.1 - rows.0, cols.1 - cols.0);
    plan.probabilities(q, kt, rows, cols, p);
    let dsm = &mut ds[..m * w];
    dsm.iter_mut().for_each(|x| *x = 0.0);
    gemm_acc(&d_o.data()[rows.0 * plan.dv..rows.1 * plan.dv], &vt[..plan.dv * w], dsm, m, plan.dv, w);
    plan.pre_activation_grad(p, ds, rows, cols)
}

#[allow(clippy::too_many_arguments)]
fn backward_sequential(
    plan: &Plan,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    tracker: &AuxTracker,
    dq: &mut Matrix,
    dk: &mut Matrix,
    dvm: &mut Matrix,
) -> f64 {
    let (d, dv) = (plan.d, plan.dv);
    let mut kt = tracker.alloc(d * plan.bc);
    let mut vt = tracker.alloc(dv * plan.bc);
    let mut p = tracker.alloc_logits(plan.tile());
    let mut ds = tracker.alloc_logits(plan.tile());
    let mut row_sums = vec![0.0; plan.row_blocks()];
    for bj in 0..plan.col_blocks() {
        let cols = plan.cols(bj);
        let w = cols.1 - cols.0;
        plan.load_transposed(k, cols, &mut kt);
        plan.load_transposed(v, cols, &mut vt);
        for (bi, row_sum) in row_sums.iter_mut().enumerate() {
            let rows = plan.rows(bi);
            let m = rows.1 - rows.0;
            if plan.fully_masked(rows, cols) {
                tracker.block_skipped();
                continue;
            }
            let do_i = &d_o.data()[rows.0 * dv..rows.1 * dv];
            if is_zero(do_i) {
                continue;
            }
            tracker.block_computed(m * w);
            *row_sum += tile_grads(plan, q, d_o, &kt, &vt, rows, cols, &mut p, &mut ds);
            gemm_tn_acc(&p[..m * w], do_i, &mut dvm.data_mut()[cols.0 * dv..cols.1 * dv], m, w, dv);
            gemm_tn_acc(&ds[..m * w], &q.data()[rows.0 * d..rows.1 * d], &mut dk.data_mut()[cols.0 * d..cols.1 * d], m, w, d);
            gemm_acc(&ds[..m * w], &k.data()[cols.0 * d..cols.1 * d], &mut dq.data_mut()[rows.0 * d..rows.1 * d], m, w, d);
            tracker.dq_update();
        }
    }
    row_sums.iter().sum()
}

#[allow(clippy::too_many_arguments)]
fn backward_two_pass(
    plan: &Plan,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    tracker: &AuxTracker,
    dq: &mut Matrix,
    dk: &mut Matrix,
    dvm: &mut Matrix,
    schedule: Schedule,
) -> f64 {
    let (d, dv) = (plan.d, plan.dv);
    for_each_chunk_pair_mut(
        dk.data_mut(),
        plan.bc * d,
        dvm.data_mut(),
        plan.bc * dv,
        schedule,
        |bj, dk_j, dv_j| {
            let cols = plan.cols(bj);
            let w = cols.1 - cols.0;
            let mut kt = tracker.alloc(d * plan.bc);
            let mut vt = tracker.alloc(dv * plan.bc);
            let mut p = tracker.alloc_logits(plan.tile());
            let mut ds = tracker.alloc_logits(plan.tile());
            plan.load_transposed(k, cols, &mut kt);
            plan.load_transposed(v, cols, &mut vt);
            for bi in 0..plan.row_blocks() {
                let rows = plan.rows(bi);
                let m = rows.1 - rows.0;
                if plan.fully_masked(rows, cols) {
                    tracker.block_skipped();
                    continue;
                }
                let do_i = &d_o.data()[rows.0 * dv..rows.1 * dv];
                if is_zero(do_i) {
                    continue;
                }
                tracker.block_computed(m * w);
                tile_grads(plan, q, d_o, &kt, &vt, rows, cols, &mut p, &mut ds);
                gemm_tn_acc(&p[..m * w], do_i, dv_j, m, w, dv);
                gemm_tn_acc(&ds[..m * w], &q.data()[rows.0 * d..rows.1 * d], dk_j, m, w, d);
            }
        },
    );

    let mut row_sums = vec![0.0; plan.row_blocks()];
    for_each_chunk_pair_mut(dq.data_mut(), plan.br * d, &mut row_sums, 1, schedule, |bi, dq_i, sum| {
        let rows = plan.rows(bi);
        let m = rows.1 - rows.0;
        let do_i = &d_o.data()[rows.0 * dv..rows.1 * dv];
        if is_zero(do_i) {
            return;
        }
        let mut kt = tracker.alloc(d * plan.bc);
        let mut vt = tracker.alloc(dv * plan.bc);
        let mut p = tracker.alloc_logits(plan.tile());
        let mut ds = tracker.alloc_logits(plan.tile());
        for bj in 0..plan.col_blocks() {
            let cols = plan.cols(bj);
            if plan.fully_masked(rows, cols) {
                continue;
            }
            let w = cols.1 - cols.0;
            plan.load_transposed(k, cols, &mut kt);
            plan.load_transposed(v, cols, &mut vt);
            tracker.block_computed(m * w);
            sum[0] += tile_grads(plan, q, d_o, &kt, &vt, rows, cols, &mut p, &mut ds);
            gemm_acc(&ds[..m * w], &k.data()[cols.0 * d..cols.1 * d], dq_i, m, w, d);
            tracker.dq_update();
        }
    });
    row_sums.iter().sum()
}
