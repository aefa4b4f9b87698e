mod common;

use common::{ksum_desk, ksum_task, pair_desk};
use sigattn::attn::{Activation, AttnConfig, BiasMode};
use sigattn::nn::{
    adam_update, eval_length_generalization, gen_ksum, gen_pair_repeat, ksum_target, model_forward, pair_repeat_label,
    params_from_bytes, params_to_bytes, train, AdamConfig, ModelConfig, ModelParams, TrainConfig,
};
use sigattn::{Matrix, Rng, Schedule};

fn short(tc: TrainConfig, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        eval_every: 5,
        metrics_every: 3,
        target: None,
        ..tc
    }
}

fn small(mut m: ModelConfig) -> ModelConfig {
    m.d_model = 8;
    m.heads = 2;
    m
}

#[test]
fn adam_leaves_parameters_alone_under_zero_gradient() {
    let mut p = [0.3, -1.2];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    for t in 1..=5 {
        adam_update(&mut p, &[0.0; 2], &mut m, &mut v, t, 0.1, &AdamConfig::default());
    }
    assert_eq!(p, [0.3, -1.2]);
}

#[test]
fn adam_first_step_is_lr_over_one_plus_eps() {
    let hp = AdamConfig::default();
    let mut p = [1.0];
    let (mut m, mut v) = ([0.0], [0.0]);
    adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &hp);
    let want = 1.0 - 0.1 / (1.0 + hp.eps);
    assert!((p[0] - want).abs() <= 1e-15, "{} vs {want}", p[0]);
}

#[test]
fn zero_learning_rate_freezes_the_model() {
    let (task, m, tc) = ksum_desk(Activation::Sigmoid);
    let m = small(m);
    let tc = TrainConfig { lr: 0.0, ..short(tc, 12) };
    let rng = Rng::new(3);
    let r = train(&task, &m, &tc, &rng).unwrap();
    assert_eq!(r.params, ModelParams::init(&m, &mut rng.fork(1)).unwrap());
    let first = r.evals[0].loss;
    assert!(r.evals.iter().all(|e| e.loss == first));
}

#[test]
fn same_seed_same_run() {
    let (task, m, tc) = pair_desk(Activation::Sigmoid);
    let (m, tc) = (small(m), short(tc, 10));
    let a = train(&task, &m, &tc, &Rng::new(9)).unwrap();
    let b = train(&task, &m, &tc, &Rng::new(9)).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.evals, b.evals);
    assert_eq!(a.params, b.params);
    let seq = train(&task, &m, &TrainConfig { parallel: Schedule::Sequential, ..tc }, &Rng::new(9)).unwrap();
    assert_eq!(a.params, seq.params);
    let other = train(&task, &m, &tc, &Rng::new(10)).unwrap();
    assert_ne!(a.params, other.params);
}

#[test]
fn untrained_model_is_at_chance() {
    let (_, m, _) = pair_desk(Activation::Sigmoid);
    let params = ModelParams::init(&m, &mut Rng::new(1)).unwrap();
    let samples = 512;
    let rows = eval_length_generalization(&params, &m, 5, &[8, 12], samples, &mut Rng::new(2)).unwrap();
    let sigma = (0.25 / samples as f64).sqrt();
    for r in rows {
        assert!((r.accuracy - 0.5).abs() <= 3.0 * sigma, "length {}: {}", r.length, r.accuracy);
    }
    assert!(eval_length_generalization(&params, &m, 5, &[8], 0, &mut Rng::new(2)).unwrap().is_empty());
}

#[test]
fn zero_layerscale_gates_make_blocks_identity() {
    let (_, mut m, _) = ksum_desk(Activation::Sigmoid);
    m.layerscale = Some(1e-4);
    let mut rng = Rng::new(4);
    let mut params = ModelParams::init(&m, &mut rng).unwrap();
    assert!(params.layers[0].gamma_a.data().iter().all(|&g| g == 1e-4));
    for l in &mut params.layers {
        l.gamma_a = Matrix::zeros(1, m.d_model);
        l.gamma_m = Matrix::zeros(1, m.d_model);
    }
    let x = gen_ksum(10, 1, 4, &mut rng).unwrap().inputs;
    let before = model_forward(&params, &m, &x).unwrap().predictions;
    params.layers[0].wq = params.layers[0].wq.scale(3.0);
    params.layers[0].wv = params.layers[0].wv.scale(-2.0);
    assert_eq!(model_forward(&params, &m, &x).unwrap().predictions, before);
}

#[test]
fn zero_readout_gives_constant_predictions() {
    let (_, m, _) = ksum_desk(Activation::Softmax);
    let mut rng = Rng::new(6);
    let mut params = ModelParams::init(&m, &mut rng).unwrap();
    params.head_w = Matrix::zeros(params.head_w.rows(), params.head_w.cols());
    params.head_b = Matrix::filled(1, 1, 0.25);
    let x = gen_ksum(10, 1, 5, &mut rng).unwrap().inputs;
    assert_eq!(model_forward(&params, &m, &x).unwrap().predictions, vec![0.25; 5]);
}

#[test]
fn tiled_attention_matches_reference_in_the_model() {
    let (_, m, _) = ksum_desk(Activation::Sigmoid);
    let mut rng = Rng::new(12);
    let params = ModelParams::init(&ModelConfig { init_std: 0.3, ..m.clone() }, &mut rng).unwrap();
    let x = gen_ksum(10, 1, 6, &mut rng).unwrap().inputs;
    let naive = model_forward(&params, &m, &x).unwrap().predictions;
    let mut fm = m.clone();
    fm.use_flash = true;
    fm.flash_blocks = sigattn::flash::BlockSpec::new(3, 7).unwrap();
    let tiled = model_forward(&params, &fm, &x).unwrap().predictions;
    for (a, b) in naive.iter().zip(&tiled) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn params_round_trip_through_bytes() {
    let (_, m, _) = pair_desk(Activation::Sigmoid);
    let params = ModelParams::init(&m, &mut Rng::new(2)).unwrap();
    let (bytes, manifest) = params_to_bytes(&params, &m);
    assert_eq!(bytes.len(), 8 * params.num_scalars());
    assert_eq!(params_from_bytes(&bytes, &manifest).unwrap(), params);
    assert!(params_from_bytes(&bytes[8..], &manifest).is_err());
}

#[test]
fn pair_repeat_label_examples() {
    assert_eq!(pair_repeat_label(&[1, 2, 3, 1, 2]), 1.0);
    assert_eq!(pair_repeat_label(&[1, 2, 3, 4, 5]), 0.0);
    assert_eq!(pair_repeat_label(&[1, 1, 1, 1]), 1.0);
    assert_eq!(pair_repeat_label(&[1, 2, 1]), 0.0);
}

#[test]
fn generated_batches_match_their_labels() {
    let mut rng = Rng::new(8);
    let b = gen_pair_repeat(5, (8, 10), 14, 64, &mut rng).unwrap();
    assert_eq!(b.targets.iter().filter(|&&t| t == 1.0).count(), 32);
    for (i, &t) in b.targets.iter().enumerate() {
        let seq: Vec<usize> = b.inputs.row(i).iter().map(|&s| s as usize).take_while(|&s| s < 5).collect();
        assert!((8..=10).contains(&seq.len()));
        assert!(b.inputs.row(i)[seq.len()..].iter().all(|&s| s == 5.0));
        assert_eq!(pair_repeat_label(&seq), t);
    }

    let row = [1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    assert_eq!(ksum_target(&row), 5.0);
    let b = gen_ksum(6, 2, 20, &mut rng).unwrap();
    for i in 0..20 {
        let r = b.inputs.row(i);
        assert_eq!(r[6..].iter().sum::<f64>(), 2.0);
        let want: f64 = (0..6).filter(|&j| r[6 + j] == 1.0).map(|j| r[j]).sum();
        assert_eq!(b.targets[i], want);
    }
}

#[test]
fn recorded_attention_rows() {
    let mut rng = Rng::new(14);
    let x = gen_ksum(10, 1, 3, &mut rng).unwrap().inputs;
    for (attn, normalized) in [
        (AttnConfig::sigmoid().with_bias(BiasMode::Constant(-1.0)), false),
        (AttnConfig::softmax(), true),
    ] {
        let mut m = ksum_task().model_config();
        m.d_model = 16;
        m.init_std = 0.5;
        m.attn = attn;
        let params = ModelParams::init(&m, &mut rng).unwrap();
        let out = model_forward(&params, &m, &x).unwrap();
        let worst = out.attention[0]
            .iter()
            .flat_map(|p| (0..p.rows()).map(move |i| (p.row(i).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max);
        if normalized {
            assert!(worst <= 1e-12, "{worst}");
        } else {
            assert!(worst > 1e-3, "{worst}");
        }
    }
}

#[test]
fn short_pair_repeat_run_learns_something() {
    let (task, m, tc) = pair_desk(Activation::Sigmoid);
    let tc = TrainConfig {
        steps: 600,
        eval_every: 600,
        ..tc
    };
    let r = train(&task, &m, &tc, &Rng::new(0)).unwrap();
    assert!(r.final_eval().loss < std::f64::consts::LN_2, "{:?}", r.final_eval());
    assert!(r.records.iter().all(|rec| rec.attn_norm.len() == 2 && rec.hoyer.len() == 2));
}

/// Steps to 0.9 held-out accuracy: sigmoid needs at most 1.5× the softmax
/// steps. Slow on one core; run with `--ignored`.
#[test]
#[ignore]
fn pair_repeat_sigmoid_is_not_slower_than_softmax() {
    for seed in 0..3 {
        let mut steps = Vec::new();
        for act in [Activation::Sigmoid, Activation::Softmax] {
            let (task, m, tc) = pair_desk(act);
            let r = train(&task, &m, &tc, &Rng::new(seed)).unwrap();
            assert!(r.reached_target, "{act:?} seed {seed}: {:?}", r.final_eval());
            steps.push(r.steps_run as f64);
        }
        println!("seed {seed}: sigmoid {} softmax {}", steps[0], steps[1]);
        assert!(steps[0] <= 1.5 * steps[1], "seed {seed}: {steps:?}");
    }
}
