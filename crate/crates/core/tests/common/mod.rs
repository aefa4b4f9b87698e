#![allow(dead_code)]

use sigattn::attn::{Activation, AttnConfig, BiasMode};
use sigattn::nn::{
    loss_and_grad, InputKind, LrSchedule, ModelConfig, ModelParams, PosEncoding, TaskBatch, TaskKind, TaskSpec, TrainConfig,
};
use sigattn::{Matrix, Rng, Schedule};

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` at every entry of `x`.
pub fn central_diff(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

pub fn worst(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}

/// Attention configs with one axis toggled at a time.
pub fn attn_axes() -> Vec<(String, AttnConfig)> {
    let sig = AttnConfig::sigmoid();
    let mut out = vec![
        ("sigmoid".to_string(), sig),
        ("softmax".into(), AttnConfig::softmax()),
        ("relu".into(), AttnConfig { activation: Activation::Relu, ..sig }),
        ("tanh".into(), AttnConfig { activation: Activation::Tanh, ..sig }),
        ("causal".into(), sig.with_causal(true)),
        ("alpha=1".into(), sig.with_alpha(1.0)),
        ("alpha=1 causal".into(), sig.with_alpha(1.0).with_causal(true)),
        ("qk_norm".into(), sig.with_qk_norm(true)),
        ("alibi".into(), sig.with_alibi(4, 1)),
        ("alibi causal".into(), sig.with_alibi(4, 2).with_causal(true)),
    ];
    for (name, b) in bias_modes() {
        out.push((format!("bias {name}"), sig.with_bias(b)));
        out.push((format!("causal bias {name}"), sig.with_causal(true).with_bias(b)));
    }
    out
}

pub fn bias_modes() -> Vec<(&'static str, BiasMode)> {
    vec![
        ("none", BiasMode::None),
        ("const", BiasMode::Constant(-2.0)),
        ("neg_log_n", BiasMode::NegLogN),
        ("neg_log_row_len", BiasMode::NegLogRowLen),
        ("learnable", BiasMode::Learnable(-1.0)),
    ]
}

/// Full-model configs: a base 2-token, width-4, 1-layer model with one axis
/// changed at a time.
pub fn model_axes() -> Vec<(String, ModelConfig)> {
    let mut base = ModelConfig::new(InputKind::Scalar, 2);
    base.d_model = 4;
    base.heads = 2;
    base.mlp_ratio = 2;
    base.init_std = 0.5;
    base.attn = AttnConfig::sigmoid().with_bias(BiasMode::Learnable(-1.0));
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let mut out = vec![
        ("base".to_string(), base.clone()),
        ("softmax".into(), with(&|c| c.attn = AttnConfig::softmax())),
        ("qk_norm".into(), with(&|c| c.attn.qk_norm = true)),
        ("layerscale".into(), with(&|c| c.layerscale = Some(0.5))),
        ("alibi".into(), with(&|c| c.pos = PosEncoding::Alibi)),
        ("rope".into(), with(&|c| c.pos = PosEncoding::Rope)),
        ("sincos".into(), with(&|c| c.pos = PosEncoding::SinCos)),
        ("no positions".into(), with(&|c| c.pos = PosEncoding::None)),
        ("causal".into(), with(&|c| c.attn.causal = true)),
        ("alpha=1".into(), with(&|c| c.attn.alpha = 1.0)),
        ("flash".into(), with(&|c| c.use_flash = true)),
        ("vocab input".into(), with(&|c| c.input = InputKind::Vocab(3))),
        ("two layers".into(), with(&|c| c.layers = 2)),
    ];
    for (name, b) in bias_modes() {
        out.push((format!("bias {name}"), with(&|c| c.attn.bias = b)));
    }
    out
}

/// Two samples shaped for `cfg`; vocabulary inputs get a classification loss.
pub fn model_batch(cfg: &ModelConfig, rng: &mut Rng) -> TaskBatch {
    let t = cfg.max_len;
    match cfg.input {
        InputKind::Scalar => TaskBatch {
            kind: TaskKind::Ksum,
            inputs: Matrix::from_fn(2, t, |_, _| rng.normal()),
            targets: vec![0.7, -1.3],
        },
        InputKind::Vocab(v) => TaskBatch {
            kind: TaskKind::PairRepeat,
            inputs: Matrix::from_fn(2, t, |_, _| rng.below(v) as f64),
            targets: vec![1.0, 0.0],
        },
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over every model parameter.
pub fn model_fd_worst(cfg: &ModelConfig, seed: u64, h: f64, floor: f64) -> f64 {
    let mut rng = Rng::new(seed);
    let params = ModelParams::init(cfg, &mut rng).unwrap();
    let batch = model_batch(cfg, &mut rng);
    let analytic = loss_and_grad(&params, cfg, &batch, Schedule::Sequential).unwrap().grads;
    let mut worst_err: f64 = 0.0;
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].1.len();
        for i in 0..len {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[ti].data_mut()[i] += delta;
                loss_and_grad(&p, cfg, &batch, Schedule::Sequential).unwrap().loss
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.tensors()[ti].1.data()[i];
            worst_err = worst_err.max(rel_err(a, numeric, floor));
        }
    }
    worst_err
}

pub fn ksum_task() -> TaskSpec {
    TaskSpec::Ksum { n: 10, k: 1 }
}

pub fn pair_task() -> TaskSpec {
    TaskSpec::PairRepeat {
        vocab: 5,
        min_len: 8,
        max_train_len: 10,
        max_len: 14,
    }
}

/// Width-32 k-summation model: one layer, sigmoid with `b = −4` or softmax.
pub fn ksum_desk(act: Activation) -> (TaskSpec, ModelConfig, TrainConfig) {
    let task = ksum_task();
    let mut m = task.model_config();
    m.d_model = 32;
    m.attn = match act {
        Activation::Softmax => AttnConfig::softmax(),
        _ => AttnConfig::sigmoid().with_bias(BiasMode::Constant(-4.0)),
    };
    let tc = TrainConfig {
        steps: 20_000,
        batch: 32,
        lr: 1e-3,
        eval_every: 250,
        metrics_every: 250,
        target: Some(0.05),
        ..TrainConfig::default()
    };
    (task, m, tc)
}

/// Width-32 pair-repeat model: two layers with QK norm, sigmoid with a
/// learnable bias starting at −4 or softmax, warmup-cosine schedule.
pub fn pair_desk(act: Activation) -> (TaskSpec, ModelConfig, TrainConfig) {
    let task = pair_task();
    let mut m = task.model_config();
    m.d_model = 32;
    m.layers = 2;
    m.init_std = 0.1;
    m.attn = match act {
        Activation::Softmax => AttnConfig::softmax(),
        _ => AttnConfig::sigmoid().with_bias(BiasMode::Learnable(-4.0)),
    }
    .with_qk_norm(true);
    let tc = TrainConfig {
        steps: 31_250,
        batch: 16,
        lr: 1e-3,
        schedule: LrSchedule::WarmupCosine { warmup_frac: 0.05 },
        eval_every: 250,
        metrics_every: 250,
        target: Some(0.9),
        ..TrainConfig::default()
    };
    (task, m, tc)
}
