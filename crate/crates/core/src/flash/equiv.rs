use serde::{Deserialize, Serialize};

use crate::attn::{attn_backward, attn_forward, AttnConfig, BiasMode};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::parallel::Schedule;
use crate::rng::{rng_normal, Rng};

use super::kernel::{flash_backward_with, flash_forward_with, BlockSpec};

/// `{1, 3, 32, 64, n, n+7}²`, deduplicated.
pub fn block_grid(n: usize) -> Vec<BlockSpec> {
    let mut sizes = vec![1, 3, 32, 64, n, n + 7];
    sizes.sort_unstable();
    sizes.dedup();
    let mut out = Vec::with_capacity(sizes.len() * sizes.len());
    for &r in &sizes {
        for &c in &sizes {
            out.push(BlockSpec { b_r: r, b_c: c });
        }
    }
    out
}

/// Causal and full attention, each with and without ALiBi and with and
/// without the `−ln n` bias.
pub fn equivalence_configs() -> Vec<(String, AttnConfig)> {
    let mut out = Vec::new();
    for causal in [false, true] {
        for alibi in [false, true] {
            for neg_log in [false, true] {
                let mut c = AttnConfig::sigmoid().with_causal(causal);
                if alibi {
                    c = c.with_alibi(8, 3);
                }
                if neg_log {
                    c = c.with_bias(BiasMode::NegLogN);
                }
                let name = format!(
                    "{}{}{}",
                    if causal { "causal" } else { "full" },
                    if alibi { "+alibi" } else { "" },
                    if neg_log { "+neg_log_n" } else { "" }
                );
                out.push((name, c));
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquivRow {
    pub n: usize,
    pub config: String,
    pub tilings: usize,
    /// Max-abs difference of `O` over every tiling and both schedules.
    pub forward_err: f64,
    /// Max-abs difference over `dQ`, `dK`, `dV`.
    pub backward_err: f64,
}

/// Compares the tiled kernels with the reference over `blocks` (or the
/// default grid) at each length in `ns`.
pub fn equivalence_suite(ns: &[usize], d: usize, blocks: Option<BlockSpec>, seed: u64) -> Result<Vec<EquivRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        let mut rng = Rng::new(seed ^ n as u64);
        let mut draw = || rng_normal(&mut rng, n, d, 0.0, 1.0, None);
        let (q, k, v, d_o): (Matrix, Matrix, Matrix, Matrix) = (draw(), draw(), draw(), draw());
        let grid = match blocks {
            Some(b) => vec![b],
            None => block_grid(n),
        };
        for (name, cfg) in equivalence_configs() {
            let o_ref = attn_forward(&q, &k, &v, &cfg)?.o;
            let g_ref = attn_backward(&q, &k, &v, &d_o, &cfg)?;
            let (mut fwd, mut bwd) = (0.0f64, 0.0f64);
            for &b in &grid {
                for schedule in [Schedule::Sequential, Schedule::Parallel] {
                    let (o, _) = flash_forward_with(&q, &k, &v, &cfg, b, schedule)?;
                    fwd = fwd.max(o.max_abs_diff(&o_ref));
                    let (g, _) = flash_backward_with(&q, &k, &v, &d_o, &cfg, b, schedule)?;
                    bwd = bwd.max(g.max_abs_diff(&g_ref));
                }
            }
            rows.push(EquivRow {
                n,
                config: name,
                tilings: grid.len(),
                forward_err: fwd,
                backward_err: bwd,
            });
        }
    }
    Ok(rows)
}
