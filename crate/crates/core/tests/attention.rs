#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use common::{attn_axes, central_diff, worst};
use proptest::prelude::*;
use sigattn::attn::{attn_backward, attn_forward, Activation, AttnConfig, BiasMode};
use sigattn::flash::{flash_backward_with, flash_forward_with, BlockSpec};
use sigattn::{rng_normal, Matrix, Rng, Schedule};

fn qkvo(seed: u64, n: usize, d: usize) -> [Matrix; 4] {
    let mut r = Rng::new(seed);
    [(); 4].map(|_| rng_normal(&mut r, n, d, 0.0, 1.0, None))
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn flash_ok(cfg: &AttnConfig) -> bool {
    cfg.activation == Activation::Sigmoid && cfg.alpha == 0.0 && !cfg.qk_norm
}

#[test]
fn backward_matches_central_differences() {
    let (n, d, h) = (5, 3, 1e-5);
    let blocks = BlockSpec::new(2, 3).unwrap();
    let mut failures = Vec::new();
    for (name, cfg) in attn_axes() {
        let [q, k, v, d_o] = qkvo(11, n, d);
        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| dot(&attn_forward(q, k, v, &cfg).unwrap().o, &d_o);
        let g = attn_backward(&q, &k, &v, &d_o, &cfg).unwrap();
        let err = worst(&g.dq, &central_diff(&q, h, |x| loss(x, &k, &v)), 1e-4)
            .max(worst(&g.dk, &central_diff(&k, h, |x| loss(&q, x, &v)), 1e-4))
            .max(worst(&g.dv, &central_diff(&v, h, |x| loss(&q, &k, x)), 1e-4));
        if !(err <= 1e-6) {
            failures.push(format!("naive {name}: {err:.3e}"));
        }
        if flash_ok(&cfg) {
            let floss = |q: &Matrix, k: &Matrix, v: &Matrix| {
                dot(&flash_forward_with(q, k, v, &cfg, blocks, Schedule::Sequential).unwrap().0, &d_o)
            };
            let (g, _) = flash_backward_with(&q, &k, &v, &d_o, &cfg, blocks, Schedule::Parallel).unwrap();
            let err = worst(&g.dq, &central_diff(&q, h, |x| floss(x, &k, &v)), 1e-4)
                .max(worst(&g.dk, &central_diff(&k, h, |x| floss(&q, x, &v)), 1e-4))
                .max(worst(&g.dv, &central_diff(&v, h, |x| floss(&q, &k, x)), 1e-4));
            if !(err <= 1e-6) {
                failures.push(format!("flash {name}: {err:.3e}"));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

fn duplicated(m: &Matrix) -> Matrix {
    let (n, d) = m.shape();
    Matrix::from_fn(2 * n, d, |i, j| m.get(i % n, j))
}

#[test]
fn token_duplication_scales_by_two_to_one_minus_alpha() {
    let [q, k, v, _] = qkvo(5, 6, 4);
    for alpha in [0.0, 0.5, 1.0] {
        let cfg = AttnConfig::sigmoid().with_alpha(alpha);
        let o = attn_forward(&q, &k, &v, &cfg).unwrap().o;
        let o2 = attn_forward(&duplicated(&q), &duplicated(&k), &duplicated(&v), &cfg).unwrap().o;
        let ratio = 2f64.powf(1.0 - alpha);
        for i in 0..12 {
            for j in 0..4 {
                let want = ratio * o.get(i % 6, j);
                assert!((o2.get(i, j) - want).abs() <= 1e-12, "alpha {alpha} ({i},{j})");
            }
        }
    }
}

#[test]
fn sigmoid_rows_are_not_normalized() {
    let z = Matrix::zeros(4, 2);
    let p = attn_forward(&z, &z, &z, &AttnConfig::sigmoid()).unwrap().p;
    for i in 0..4 {
        assert_eq!(p.row(i).iter().sum::<f64>(), 2.0);
    }
    let b = BiasMode::Constant(-(3f64).ln());
    let p = attn_forward(&z, &z, &z, &AttnConfig::sigmoid().with_bias(b)).unwrap().p;
    assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn single_token_softmax_returns_values() {
    let [q, k, v, _] = qkvo(2, 1, 3);
    assert_eq!(attn_forward(&q, &k, &v, &AttnConfig::softmax()).unwrap().o, v);
}

fn config_strategy() -> impl Strategy<Value = AttnConfig> {
    (any::<bool>(), 0usize..3, prop::option::of(0usize..4)).prop_map(|(causal, bias, alibi)| {
        let mut c = AttnConfig::sigmoid().with_causal(causal).with_bias(match bias {
            0 => BiasMode::None,
            1 => BiasMode::NegLogN,
            _ => BiasMode::Constant(-2.5),
        });
        if let Some(h) = alibi {
            c = c.with_alibi(4, h);
        }
        c
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), n in 1usize..12, d in 1usize..5, causal in any::<bool>()) {
        let [q, k, v, _] = qkvo(seed, n, d);
        let p = attn_forward(&q, &k, &v, &AttnConfig::softmax().with_causal(causal)).unwrap().p;
        for i in 0..n {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_weights_are_elementwise(seed in any::<u64>(), n in 1usize..12, d in 1usize..5) {
        let [q, k, v, _] = qkvo(seed, n, d);
        let cfg = AttnConfig::sigmoid().with_bias(BiasMode::Constant(-1.0));
        let p = attn_forward(&q, &k, &v, &cfg).unwrap().p;
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..n {
            for j in 0..n {
                let s: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale - 1.0;
                let want = 1.0 / (1.0 + (-s).exp());
                prop_assert!((p.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiled_kernels_match_reference_bitwise(
        seed in any::<u64>(),
        n in 1usize..40,
        d in 1usize..6,
        b_r in 1usize..48,
        b_c in 1usize..48,
        cfg in config_strategy(),
        parallel in any::<bool>(),
    ) {
        let [q, k, v, d_o] = qkvo(seed, n, d);
        let blocks = BlockSpec::new(b_r, b_c).unwrap();
        let schedule = if parallel { Schedule::Parallel } else { Schedule::Sequential };
        let (o, mem) = flash_forward_with(&q, &k, &v, &cfg, blocks, schedule).unwrap();
        prop_assert_eq!(o, attn_forward(&q, &k, &v, &cfg).unwrap().o);
        let one_tile = b_r >= n && b_c >= n;
        prop_assert_eq!(mem.n_sq_materialized, one_tile);
        let (g, mem) = flash_backward_with(&q, &k, &v, &d_o, &cfg, blocks, schedule).unwrap();
        prop_assert_eq!(g, attn_backward(&q, &k, &v, &d_o, &cfg).unwrap());
        prop_assert_eq!(mem.n_sq_materialized, one_tile);
    }
}
