//! Acceptance criteria 1–12. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 3 4 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use sigattn::attn::{attn_forward, Activation, AttnConfig, BiasMode};
use sigattn::flash::{equivalence_suite, flash_backward_with, flash_forward_with, BlockSpec};
use sigattn::gradcheck::{checkgrad_suite, GradCheckOptions};
use sigattn::nn::{
    eval_length_generalization, metrics_csv_header, train, write_metrics_csv, LrSchedule, ModelConfig, TaskSpec,
    TrainConfig, TrainResult,
};
use sigattn::theory::{
    c_threshold, contextual_mapping_check, empirical_jacobian_norm, flop_count, hoyer_sparsity, lipschitz_bound,
    lipschitz_instance, solve_bias, SOLVE_BIAS_TOL,
};
use sigattn::{rng_normal, Matrix, Rng, Schedule};

type Check = fn() -> Result<String>;

const CRITERIA: [(&str, Option<u64>, Check); 12] = [
    ("kernel equivalence", Some(60), kernel_equivalence),
    ("gradient correctness", Some(300), gradient_correctness),
    ("flop table", None, flop_table),
    ("bias normalization", None, bias_normalization),
    ("lipschitz bound", Some(120), lipschitz),
    ("sequence doubling", None, sequence_doubling),
    ("contextual mapping", Some(30), contextual_mapping),
    ("k-summation training", Some(900), ksum_training),
    ("pair-repeat training", Some(3600), pair_repeat_training),
    ("hoyer metric", None, hoyer_metric),
    ("memory contract", None, memory_contract),
    ("determinism", None, determinism),
];

fn main() {
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("single-threaded pool");
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (i, (name, budget, check)) in CRITERIA.iter().enumerate() {
        let id = i + 1;
        if !picked.is_empty() && !picked.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(anyhow::anyhow!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let over = budget.filter(|&b| took > Duration::from_secs(b));
        let (pass, detail) = match (outcome, over) {
            (Ok(d), None) => (true, d),
            (Ok(d), Some(b)) => (false, format!("{d}; exceeded {b} s budget")),
            (Err(e), _) => (false, format!("{e:#}")),
        };
        println!(
            "criterion {id:>2} {name}: {} ({detail}; {:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn kernel_equivalence() -> Result<String> {
    let rows = equivalence_suite(&[16, 130, 257], 16, None, 0)?;
    ensure!(rows.len() == 3 * 8, "expected 24 rows, got {}", rows.len());
    for r in &rows {
        ensure!(r.tilings == 36 || r.n == 16 && r.tilings == 25, "n={} {}: {} tilings", r.n, r.config, r.tilings);
    }
    let worst = rows.iter().map(|r| r.forward_err.max(r.backward_err)).fold(0.0, f64::max);
    ensure!(worst <= 1e-10, "max-abs error {worst:.3e}");
    Ok(format!("24 configs, max-abs error {worst:.1e}"))
}

fn gradient_correctness() -> Result<String> {
    let rows = checkgrad_suite(&GradCheckOptions::default())?;
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} {:.2e}", r.axis, r.worst_rel_err))
        .collect();
    ensure!(bad.is_empty(), "{bad:?}");
    let attn = rows.iter().filter(|r| r.tolerance == 1e-6).map(|r| r.worst_rel_err).fold(0.0, f64::max);
    let model = rows.iter().filter(|r| r.tolerance == 1e-5).map(|r| r.worst_rel_err).fold(0.0, f64::max);
    ensure!(rows.iter().any(|r| r.tolerance == 1e-5), "no full-model axes checked");
    Ok(format!("{} axes, worst attention {attn:.1e}, worst model {model:.1e}", rows.len()))
}

fn flop_table() -> Result<String> {
    let f = flop_count(2048, 64, false, Activation::Sigmoid)?;
    ensure!(f.c == 1.0);
    ensure!(f.logits == 262144.0 && f.softmax == 6144.0 && f.sigmoid == 10240.0, "{f:?}");
    ensure!(f.delta == 1.0 / 64.0, "delta {}", f.delta);
    Ok("262144 / 6144 / 10240, delta 1/64".into())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bias_normalization() -> Result<String> {
    for n in [2usize, 5, 100] {
        let b = solve_bias(&vec![0.0; n], SOLVE_BIAS_TOL)?;
        ensure!((b + ((n - 1) as f64).ln()).abs() <= 1e-10, "n={n}: {b}");
    }
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = 2 + rng.below(64);
        let scale = 0.1 + 8.0 * rng.uniform();
        let z: Vec<f64> = (0..n).map(|_| scale * rng.normal()).collect();
        let b = solve_bias(&z, SOLVE_BIAS_TOL)?;
        let shift = -((n - 1) as f64).ln();
        let (lo, hi) = z.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        ensure!(shift - hi <= b && b <= shift - lo, "{b} outside [{}, {}]", shift - hi, shift - lo);
        let residual = (z.iter().map(|&x| sigmoid(x + b)).sum::<f64>() - 1.0).abs();
        ensure!(residual <= 1e-12, "residual {residual:.2e}");
        worst = worst.max(residual);
    }
    Ok(format!("zero logits exact, 1000 random in bracket, worst residual {worst:.1e}"))
}

fn lipschitz() -> Result<String> {
    let mut rng = Rng::new(77);
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..100u64 {
        let n = 1 + rng.below(8);
        let d = 1 + rng.below(4);
        let b = -4.0 * rng.uniform();
        let (x, wq, wk, wv) = lipschitz_instance(n, d, 1.0, seed);
        for r in [1.0, 2.0, 4.0] {
            let xr = x.scale(r);
            let bound = lipschitz_bound(&wq, &wk, &wv, &xr, b)?.bound;
            let est = empirical_jacobian_norm(&xr, &wq, &wk, &wv, b, 100, seed)?.norm;
            ensure!(est <= bound * (1.0 + 1e-9), "instance {seed} R={r}: {est} > {bound}");
            if bound > 0.0 {
                worst_ratio = worst_ratio.max(est / bound);
            }
        }
    }
    Ok(format!("300 checks, largest estimate/bound {worst_ratio:.3}"))
}

fn duplicated(m: &Matrix) -> Matrix {
    let (n, d) = m.shape();
    Matrix::from_fn(2 * n, d, |i, j| m.get(i % n, j))
}

fn sequence_doubling() -> Result<String> {
    let mut rng = Rng::new(6);
    let (n, d) = (9, 5);
    let [q, k, v] = [(); 3].map(|_| rng_normal(&mut rng, n, d, 0.0, 1.0, None));
    for (alpha, factor) in [(1.0, 1.0), (0.0, 2.0)] {
        let cfg = AttnConfig::sigmoid().with_bias(BiasMode::Constant(-1.0)).with_alpha(alpha);
        let o = attn_forward(&q, &k, &v, &cfg)?.o;
        let o2 = attn_forward(&duplicated(&q), &duplicated(&k), &duplicated(&v), &cfg)?.o;
        for i in 0..2 * n {
            for j in 0..d {
                let err = (o2.get(i, j) - factor * o.get(i % n, j)).abs();
                ensure!(err <= 1e-12, "alpha {alpha} ({i},{j}): {err:.2e}");
            }
        }
    }
    Ok("alpha=1 unchanged, alpha=0 doubled".into())
}

fn contextual_mapping() -> Result<String> {
    let mut parts = Vec::new();
    for (delta, n, c) in [(0.5, 2, None), (0.25, 3, Some(13.0))] {
        let c = c.unwrap_or(c_threshold(delta, 1, n)?.floor() + 1.0);
        let r = contextual_mapping_check(delta, 1, n, c, false, Schedule::Sequential)?;
        ensure!(r.property_i && r.property_ii, "delta {delta} n {n}: properties fail {:?}", r.failures);
        ensure!(r.monotone && r.bounds, "delta {delta} n {n}: monotone/bounds fail {:?}", r.failures);
        ensure!(r.all_hold, "delta {delta} n {n}: {:?}", r.failures);
        parts.push(format!("delta {delta} n {n} c {c}: {} sequences", r.sequences));
    }
    Ok(parts.join(", "))
}

fn sigmoid_or_softmax(act: Activation, sigmoid_bias: BiasMode) -> AttnConfig {
    match act {
        Activation::Softmax => AttnConfig::softmax(),
        _ => AttnConfig::sigmoid().with_bias(sigmoid_bias),
    }
}

fn ksum_run(act: Activation) -> Result<TrainResult> {
    let task = TaskSpec::Ksum { n: 10, k: 1 };
    let mut m = task.model_config();
    m.d_model = 32;
    m.attn = sigmoid_or_softmax(act, BiasMode::Constant(-4.0));
    let tc = TrainConfig {
        steps: 20_000,
        batch: 32,
        lr: 1e-3,
        eval_every: 250,
        metrics_every: 1000,
        ..TrainConfig::default()
    };
    Ok(train(&task, &m, &tc, &Rng::new(0))?)
}

fn ksum_training() -> Result<String> {
    let mut finals = Vec::new();
    let mut parts = Vec::new();
    for act in [Activation::Sigmoid, Activation::Softmax] {
        let r = ksum_run(act)?;
        let hit = r.evals.iter().find(|e| e.loss < 0.05).map(|e| e.step);
        let last = r.final_eval().loss;
        ensure!(hit.is_some(), "{act:?} never reached MSE < 0.05 (final {last:.4})");
        parts.push(format!("{act:?} < 0.05 at step {} final {last:.4}", hit.unwrap_or(0)));
        finals.push(last);
    }
    let ratio = finals[0].max(finals[1]) / finals[0].min(finals[1]);
    ensure!(ratio <= 2.0, "{}; final loss ratio {ratio:.2}", parts.join(", "));
    Ok(format!("{}, ratio {ratio:.2}", parts.join(", ")))
}

fn pair_model(act: Activation) -> (TaskSpec, ModelConfig) {
    let task = TaskSpec::PairRepeat {
        vocab: 5,
        min_len: 8,
        max_train_len: 10,
        max_len: 14,
    };
    let mut m = task.model_config();
    m.d_model = 32;
    m.layers = 2;
    m.init_std = 0.1;
    m.attn = sigmoid_or_softmax(act, BiasMode::Learnable(-4.0)).with_qk_norm(true);
    (task, m)
}

fn pair_repeat_training() -> Result<String> {
    const BUDGET: usize = 500_000;
    const PER_LENGTH: usize = 2000;
    let lengths: Vec<usize> = (10..=14).collect();
    let mut parts = Vec::new();
    let mut steps = Vec::new();
    for act in [Activation::Sigmoid, Activation::Softmax] {
        let (task, m) = pair_model(act);
        let tc = TrainConfig {
            steps: BUDGET / 16,
            batch: 16,
            lr: 1e-3,
            schedule: LrSchedule::WarmupCosine { warmup_frac: 0.05 },
            eval_every: 250,
            metrics_every: 1000,
            target: Some(0.9),
            ..TrainConfig::default()
        };
        let rng = Rng::new(0);
        let r = train(&task, &m, &tc, &rng)?;
        let acc = r.final_eval().accuracy.unwrap_or(0.0);
        ensure!(r.reached_target, "{act:?} reached only {acc:.3} after {} samples", r.samples_seen);
        steps.push(r.steps_run as f64);
        let rows = eval_length_generalization(&r.params, &m, 5, &lengths, PER_LENGTH, &mut rng.fork(4))?;
        let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        for w in accs.windows(2) {
            // two independent binomial estimates at 3 standard errors
            let p = 0.5 * (w[0] + w[1]);
            let slack = 3.0 * (2.0 * p * (1.0 - p) / PER_LENGTH as f64).sqrt();
            ensure!(w[1] <= w[0] + slack, "{act:?} accuracy rises with length: {accs:?}");
        }
        let report: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}", r.length, r.accuracy)).collect();
        parts.push(format!("{act:?} 0.9 at {} samples, lengths {}", r.samples_seen, report.join(" ")));
    }
    parts.push(format!("sigmoid/softmax steps {:.2}", steps[0] / steps[1]));
    Ok(parts.join("; "))
}

fn hoyer_metric() -> Result<String> {
    ensure!(hoyer_sparsity(&[0.0, 0.0, 1.0, 0.0])? == 1.0);
    ensure!(hoyer_sparsity(&[0.3; 7])?.abs() <= 1e-15);
    let mut rng = Rng::new(10);
    for _ in 0..200 {
        let v: Vec<f64> = (0..2 + rng.below(30)).map(|_| rng.uniform()).collect();
        let lambda = (10.0 * rng.normal()).exp();
        let scaled: Vec<f64> = v.iter().map(|x| lambda * x).collect();
        let gap = (hoyer_sparsity(&v)? - hoyer_sparsity(&scaled)?).abs();
        ensure!(gap <= 1e-12, "scale invariance off by {gap:.2e}");
    }
    for act in [Activation::Sigmoid, Activation::Softmax] {
        let (task, m) = pair_model(act);
        let tc = TrainConfig {
            steps: 7,
            batch: 4,
            metrics_every: 1,
            eval_every: 7,
            eval_samples: 8,
            ..TrainConfig::default()
        };
        let r = train(&task, &m, &tc, &Rng::new(1))?;
        let mut csv = Vec::new();
        write_metrics_csv(&r.records, m.layers, &mut csv)?;
        let csv = String::from_utf8(csv)?;
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default();
        ensure!(header == metrics_csv_header(2), "{header}");
        let cols: Vec<&str> = header.split(',').collect();
        for want in ["attn_norm_layer_0", "attn_norm_layer_1", "hoyer_layer_0", "hoyer_layer_1"] {
            ensure!(cols.contains(&want), "{act:?} missing column {want}");
        }
        let rows: Vec<&str> = lines.collect();
        ensure!(rows.len() == 7, "{act:?}: {} metric rows for 7 steps", rows.len());
        for row in rows {
            let f: Vec<&str> = row.split(',').collect();
            for (c, v) in cols.iter().zip(&f) {
                if c.starts_with("attn_norm") || c.starts_with("hoyer") {
                    let x: f64 = v.parse()?;
                    ensure!(x.is_finite() && x >= 0.0, "{act:?} {c} = {v}");
                }
            }
        }
    }
    Ok("examples exact, scale invariant, per-step columns for both activations".into())
}

fn memory_contract() -> Result<String> {
    let (n, d) = (16384, 64);
    let mut rng = Rng::new(3);
    let [q, k, v, d_o] = [(); 4].map(|_| rng_normal(&mut rng, n, d, 0.0, 1.0, None));
    let cfg = AttnConfig::sigmoid().with_bias(BiasMode::NegLogN);
    let blocks = BlockSpec::default();
    let (_, fwd) = flash_forward_with(&q, &k, &v, &cfg, blocks, Schedule::default())?;
    let (_, bwd) = flash_backward_with(&q, &k, &v, &d_o, &cfg, blocks, Schedule::default())?;
    for (pass, m) in [("forward", fwd), ("backward", bwd)] {
        ensure!(m.aux_floats < 1_000_000, "{pass}: {} auxiliary floats", m.aux_floats);
        ensure!(!m.n_sq_materialized, "{pass}: n×n buffer materialized");
        ensure!(m.largest_alloc < n * n, "{pass}: allocation of {}", m.largest_alloc);
    }
    Ok(format!("forward {} / backward {} auxiliary floats", fwd.aux_floats, bwd.aux_floats))
}

fn cli(args: &[&str], out: &Path) -> Result<()> {
    let o = Command::new(env!("CARGO_BIN_EXE_sigattn"))
        .args(args)
        .args(["--threads", "1", "--seed", "11", "--out"])
        .arg(out)
        .output()?;
    ensure!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    Ok(())
}

fn determinism() -> Result<String> {
    let commands: [&[&str]; 10] = [
        &["equiv", "--n", "16,20", "--d", "4"],
        &["checkgrad", "--n", "4", "--d", "3"],
        &["theory", "bias", "--zs", "-1,0.5,2"],
        &["theory", "lipschitz", "--instances", "5"],
        &["theory", "contextual", "--delta", "0.5", "--n", "2"],
        &["theory", "flops"],
        &["theory", "hoyer"],
        &["train", "ksum", "--steps", "20", "--eval-every", "10", "--metrics-every", "5"],
        &["train", "ksum", "--arch", "mlp", "--steps", "20", "--eval-every", "10"],
        &[
            "train", "pair-repeat", "--steps", "20", "--eval-every", "10", "--eval-lengths", "8..12",
            "--eval-samples-per-length", "32",
        ],
    ];
    let mut files = 0;
    for args in commands {
        let a = tempfile::tempdir()?;
        let b = tempfile::tempdir()?;
        cli(args, a.path())?;
        cli(args, b.path())?;
        for entry in std::fs::read_dir(a.path())? {
            let path = entry?.path();
            let name = path.file_name().unwrap_or_default().to_owned();
            ensure!(std::fs::read(&path)? == std::fs::read(b.path().join(&name))?, "{args:?}: {name:?} differs");
            files += 1;
        }
    }
    Ok(format!("{} commands, {files} files byte-identical", commands.len()))
}
