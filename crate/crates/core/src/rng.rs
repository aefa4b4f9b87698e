use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;

/// Seeded generator. Gaussians come from Box–Muller over the uniform stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

/// Resampling attempts before a truncated draw is clamped.
pub const TRUNCATION_ATTEMPTS: usize = 100;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; deterministic in `(seed, stream)`.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `k` distinct indices drawn uniformly from `0..n`, in draw order.
    pub fn distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Gaussian matrix. With `truncate_at = Some(t)` each draw is resampled until
/// it falls within `mean ± t·std`, clamping after [`TRUNCATION_ATTEMPTS`].
pub fn rng_normal(rng: &mut Rng, rows: usize, cols: usize, mean: f64, std: f64, truncate_at: Option<f64>) -> Matrix {
    assert!(std >= 0.0, "rng_normal: negative std");
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let x = match truncate_at {
            None => mean + std * rng.normal(),
            Some(t) => {
                let lim = t * std;
                let mut x = mean + std * rng.normal();
                let mut tries = 1;
                while (x - mean).abs() > lim && tries < TRUNCATION_ATTEMPTS {
                    x = mean + std * rng.normal();
                    tries += 1;
                }
                x.clamp(mean - lim, mean + lim)
            }
        };
        data.push(x);
    }
    Matrix::from_vec_unchecked(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_mean() {
        let mut rng = Rng::new(3);
        let m = rng_normal(&mut rng, 4, 5, 1.25, 0.0, None);
        assert!(m.data().iter().all(|&x| x == 1.25));
    }

    #[test]
    fn same_seed_same_stream() {
        let a = rng_normal(&mut Rng::new(42), 6, 6, 0.0, 1.0, Some(2.0));
        let b = rng_normal(&mut Rng::new(42), 6, 6, 0.0, 1.0, Some(2.0));
        assert_eq!(a, b);
        let c = rng_normal(&mut Rng::new(43), 6, 6, 0.0, 1.0, Some(2.0));
        assert_ne!(a, c);
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let n = 1_000_000usize;
        let (mean, std) = (0.3, 2.0);
        let m = rng_normal(&mut Rng::new(7), 1, n, mean, std, None);
        let sample_mean = m.sum() / n as f64;
        assert!((sample_mean - mean).abs() < 4.0 * std / (n as f64).sqrt());
        let var = m.data().iter().map(|x| (x - sample_mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var.sqrt() - std).abs() < 0.01);
    }

    #[test]
    fn truncation_respected() {
        let m = rng_normal(&mut Rng::new(9), 100, 100, 0.0, 0.02, Some(2.0));
        assert!(m.data().iter().all(|x| x.abs() <= 0.04));
    }

    #[test]
    fn distinct_indices() {
        let mut rng = Rng::new(1);
        let mut v = rng.distinct(10, 10);
        v.sort();
        assert_eq!(v, (0..10).collect::<Vec<_>>());
    }
}
