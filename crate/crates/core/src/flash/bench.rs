use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attn::{attn_backward, attn_forward, AttnConfig};
use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::parallel::Schedule;
use crate::rng::{rng_normal, Rng};

use super::kernel::{flash_backward_with, flash_forward_with, BlockSpec};

/// Above this sequence length the naive path is not run by default.
pub const DEFAULT_NAIVE_MAX_N: usize = 4096;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchOptions {
    pub reps: usize,
    pub naive_max_n: usize,
    pub schedule: Schedule,
    pub causal: bool,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            reps: 5,
            naive_max_n: DEFAULT_NAIVE_MAX_N,
            schedule: Schedule::default(),
            causal: false,
            seed: 0,
        }
    }
}

/// One `(path, size)` cell. `samples_ns` is empty when the path was skipped.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub path: String,
    pub n: usize,
    pub d: usize,
    pub b_r: usize,
    pub b_c: usize,
    pub samples_ns: Vec<u128>,
    pub median_ns: Option<u128>,
    pub aux_floats: usize,
    /// The aux figure is a shape projection, not a measurement.
    pub projected: bool,
    pub skipped: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

/// Scratch the naive path would hold: logits, activations and weights for the
/// forward pass, plus `dP`, `dS` and the transposed values for the backward.
pub fn naive_aux_floats(n: usize, d: usize, backward: bool) -> usize {
    let fwd = 3 * n * n + d * n;
    if backward {
        fwd + 2 * n * n + d * n
    } else {
        fwd
    }
}

fn median(samples: &mut [u128]) -> Option<u128> {
    if samples.is_empty() {
        return None;
    }
    samples.sort_unstable();
    Some(samples[samples.len() / 2])
}

fn time<F: FnMut() -> Result<usize>>(reps: usize, mut f: F) -> Result<(Vec<u128>, usize)> {
    let mut samples = Vec::with_capacity(reps);
    let mut aux = 0;
    for _ in 0..reps {
        let t = Instant::now();
        aux = f()?;
        samples.push(t.elapsed().as_nanos());
    }
    Ok((samples, aux))
}

/// Times naive and tiled forward/backward at one size. Naive cells above
/// `opts.naive_max_n` are skipped and carry the projected allocation.
pub fn kernel_bench(n: usize, d: usize, blocks: BlockSpec, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.reps < 3 {
        return Err(invalid(format!("reps must be >= 3, got {}", opts.reps)));
    }
    if n == 0 || d == 0 {
        return Err(invalid("n and d must be >= 1"));
    }
    blocks.validate()?;
    let mut rng = Rng::new(opts.seed);
    let q = rng_normal(&mut rng, n, d, 0.0, 1.0, None);
    let k = rng_normal(&mut rng, n, d, 0.0, 1.0, None);
    let v = rng_normal(&mut rng, n, d, 0.0, 1.0, None);
    let d_o = rng_normal(&mut rng, n, d, 0.0, 1.0, None);
    let cfg = AttnConfig::sigmoid().with_causal(opts.causal);

    let row = |path: &str, mut samples: Vec<u128>, aux: usize, projected: bool, skipped: bool| BenchRow {
        path: path.into(),
        n,
        d,
        b_r: blocks.b_r,
        b_c: blocks.b_c,
        median_ns: median(&mut samples.clone()),
        samples_ns: std::mem::take(&mut samples),
        aux_floats: aux,
        projected,
        skipped,
    };

    let mut rows = Vec::new();
    for backward in [false, true] {
        let naive_path = if backward { "naive_backward" } else { "naive_forward" };
        let projected = naive_aux_floats(n, d, backward);
        if n > opts.naive_max_n {
            rows.push(row(naive_path, Vec::new(), projected, true, true));
        } else {
            let (s, _) = time(opts.reps, || {
                if backward {
                    attn_backward(&q, &k, &v, &d_o, &cfg).map(|_| 0)
                } else {
                    attn_forward(&q, &k, &v, &cfg).map(|_| 0)
                }
            })?;
            rows.push(row(naive_path, s, projected, true, false));
        }
        let flash_path = if backward { "flash_backward" } else { "flash_forward" };
        let (s, aux) = time(opts.reps, || {
            if backward {
                flash_backward_with(&q, &k, &v, &d_o, &cfg, blocks, opts.schedule).map(|(_, m)| m.aux_floats)
            } else {
                flash_forward_with(&q, &k, &v, &cfg, blocks, opts.schedule).map(|(_, m)| m.aux_floats)
            }
        })?;
        rows.push(row(flash_path, s, aux, false, false));
    }
    Ok(BenchReport { rows })
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "path,n,d,b_r,b_c,median_ns,aux_floats";

    /// Fixed columns; skipped cells print `skipped` for the median.
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "{}", Self::CSV_HEADER)?;
        }
        for r in &self.rows {
            let median = match r.median_ns {
                Some(m) => m.to_string(),
                None => "skipped".into(),
            };
            writeln!(w, "{},{},{},{},{},{},{}", r.path, r.n, r.d, r.b_r, r.b_c, median, r.aux_floats)?;
        }
        Ok(())
    }
}

/// Convenience for tests: random inputs of one shape.
pub fn random_qkv(seed: u64, n: usize, d: usize) -> (Matrix, Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    (
        rng_normal(&mut rng, n, d, 0.0, 1.0, None),
        rng_normal(&mut rng, n, d, 0.0, 1.0, None),
        rng_normal(&mut rng, n, d, 0.0, 1.0, None),
    )
}
