//! Fully connected ReLU baseline for the synthetic tasks. k-summation feeds
//! the `2n` raw features; pair-repeat feeds the one-hot encoding of every
//! position, padding symbol included.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::{mm, mm_nt, mm_tn, Matrix};
use crate::rng::{rng_normal, Rng};

use super::model::{loss_terms, Loss};
use super::optim::adam_update;
use super::tasks::{TaskBatch, TaskKind};
use super::train::{EvalPoint, TaskSpec, TrainConfig};

/// Hidden widths of the k-summation baseline.
pub const KSUM_MLP_HIDDEN: [usize; 2] = [900, 300];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// `weights[l]` maps layer `l` to layer `l+1`; the last one has one column.
    pub weights: Vec<Matrix>,
    /// Row vectors, one per weight.
    pub biases: Vec<Matrix>,
}

impl MlpParams {
    /// He-normal weights, zero biases.
    pub fn init(input_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(invalid("MLP widths must be >= 1"));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt();
            weights.push(rng_normal(rng, w[0], w[1], 0.0, std, None));
            biases.push(Matrix::zeros(1, w[1]));
        }
        Ok(Self { weights, biases })
    }

    pub fn num_scalars(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(|m| m.len()).sum()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    fn tensors(&self) -> Vec<&Matrix> {
        self.weights.iter().chain(&self.biases).collect()
    }
}

/// Input width for `task`.
pub fn mlp_input_dim(task: &TaskSpec) -> usize {
    match *task {
        TaskSpec::Ksum { n, .. } => 2 * n,
        TaskSpec::PairRepeat { vocab, max_len, .. } => max_len * (vocab + 1),
    }
}

/// Features the baseline sees for `batch`.
pub fn mlp_features(task: &TaskSpec, batch: &TaskBatch) -> Matrix {
    match *task {
        TaskSpec::Ksum { .. } => batch.inputs.clone(),
        TaskSpec::PairRepeat { vocab, max_len, .. } => {
            let symbols = vocab + 1;
            let mut x = Matrix::zeros(batch.len(), max_len * symbols);
            for b in 0..batch.len() {
                for (t, &s) in batch.inputs.row(b).iter().enumerate() {
                    x.set(b, t * symbols + s as usize, 1.0);
                }
            }
            x
        }
    }
}

/// Scalar count of a two-hidden-layer MLP of width `h` on `input_dim` inputs.
pub fn mlp_scalars(input_dim: usize, hidden: &[usize]) -> usize {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(1);
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Width `h` of a `[h, h]` MLP whose scalar count is closest to `target`.
pub fn matched_width(input_dim: usize, target: usize) -> usize {
    // h² + (in + 3)h + 1 = target
    let b = (input_dim + 3) as f64;
    let root = ((b * b + 4.0 * (target as f64 - 1.0)).max(0.0).sqrt() - b) / 2.0;
    let lo = root.floor().max(1.0) as usize;
    [lo, lo + 1]
        .into_iter()
        .min_by_key(|&h| mlp_scalars(input_dim, &[h, h]).abs_diff(target))
        .unwrap_or(1)
}

struct Activations {
    /// Input followed by every post-ReLU hidden layer.
    layers: Vec<Matrix>,
    out: Vec<f64>,
}

fn forward(p: &MlpParams, x: &Matrix) -> Result<Activations> {
    let mut layers = vec![x.clone()];
    let last = p.weights.len() - 1;
    for (l, (w, b)) in p.weights.iter().zip(&p.biases).enumerate() {
        let mut h = mm(&layers[l], w);
        for i in 0..h.rows() {
            for (v, &bv) in h.row_mut(i).iter_mut().zip(b.data()) {
                *v += bv;
                if l < last {
                    *v = v.max(0.0);
                }
            }
        }
        if l == last {
            return Ok(Activations {
                layers,
                out: h.into_data(),
            });
        }
        layers.push(h);
    }
    Err(invalid("MLP has no layers"))
}

pub fn mlp_predict(p: &MlpParams, x: &Matrix) -> Result<Vec<f64>> {
    Ok(forward(p, x)?.out)
}

/// Mean loss, gradients and accuracy on one batch of features.
pub fn mlp_loss_and_grad(p: &MlpParams, x: &Matrix, targets: &[f64], loss: Loss) -> Result<(f64, MlpParams, Option<f64>)> {
    let acts = forward(p, x)?;
    let (value, dpred, acc) = loss_terms(loss, &acts.out, targets);
    let mut grads = MlpParams {
        weights: p.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
        biases: p.biases.iter().map(|b| Matrix::zeros(1, b.cols())).collect(),
    };
    let mut delta = Matrix::new(dpred.len(), 1, dpred)?;
    for l in (0..p.weights.len()).rev() {
        grads.weights[l] = mm_tn(&acts.layers[l], &delta);
        for i in 0..delta.rows() {
            for (g, &d) in grads.biases[l].data_mut().iter_mut().zip(delta.row(i)) {
                *g += d;
            }
        }
        if l > 0 {
            let mut up = mm_nt(&delta, &p.weights[l]);
            for (u, &a) in up.data_mut().iter_mut().zip(acts.layers[l].data()) {
                if a <= 0.0 {
                    *u = 0.0;
                }
            }
            delta = up;
        }
    }
    Ok((value, grads, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct MlpTrainResult {
    pub records: Vec<MlpRecord>,
    pub evals: Vec<EvalPoint>,
    pub params: MlpParams,
    pub steps_run: usize,
    pub samples_seen: usize,
    pub reached_target: bool,
}

fn mlp_evaluate(p: &MlpParams, x: &Matrix, targets: &[f64], loss: Loss) -> Result<(f64, Option<f64>)> {
    let (value, _, acc) = loss_terms(loss, &forward(p, x)?.out, targets);
    Ok((value, acc))
}

fn target_met(kind: TaskKind, target: Option<f64>, loss: f64, acc: Option<f64>) -> bool {
    match (kind, target) {
        (_, None) => false,
        (TaskKind::Ksum, Some(t)) => loss < t,
        (TaskKind::PairRepeat, Some(t)) => acc.is_some_and(|a| a >= t),
    }
}

/// Same data streams, schedule, clipping and stopping rule as
/// [`super::train`], with the MLP in place of the transformer.
pub fn train_mlp(task: &TaskSpec, hidden: &[usize], tc: &TrainConfig, rng: &Rng) -> Result<MlpTrainResult> {
    tc.validate()?;
    let kind = task.kind();
    let loss = Loss::for_task(kind);
    let mut params = MlpParams::init(mlp_input_dim(task), hidden, &mut rng.fork(1))?;
    let mut data_rng = rng.fork(2);
    let eval_set = task.sample(tc.eval_samples, &mut rng.fork(3))?;
    let eval_x = mlp_features(task, &eval_set);

    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut m: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut v = m.clone();
    let mut records = Vec::new();
    let mut evals = Vec::new();
    let (mut samples_seen, mut steps_run, mut reached_target) = (0, 0, false);
    for step in 0..tc.steps {
        let batch = task.sample(tc.batch, &mut data_rng)?;
        let x = mlp_features(task, &batch);
        let (value, mut grads, accuracy) = mlp_loss_and_grad(&params, &x, &batch.targets, loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grad_norm = grads.tensors().iter().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt();
        let lr = tc.schedule.lr_at(tc.lr, step, tc.steps);
        if step % tc.metrics_every == 0 || step + 1 == tc.steps {
            records.push(MlpRecord {
                step,
                loss: value,
                accuracy,
                grad_norm,
                lr,
            });
        }
        if let Some(c) = tc.clip {
            if grad_norm > c {
                for t in grads.tensors_mut() {
                    t.data_mut().iter_mut().for_each(|g| *g *= c / grad_norm);
                }
            }
        }
        let gs = grads.tensors();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            adam_update(p.data_mut(), gs[i].data(), &mut m[i], &mut v[i], step as u64 + 1, lr, &tc.adam);
        }
        samples_seen += tc.batch;
        steps_run = step + 1;
        if steps_run % tc.eval_every == 0 || steps_run == tc.steps {
            let (l, a) = mlp_evaluate(&params, &eval_x, &eval_set.targets, loss)?;
            if !l.is_finite() {
                return Err(Error::Diverged { step, loss: l });
            }
            evals.push(EvalPoint {
                step: steps_run,
                samples_seen,
                loss: l,
                accuracy: a,
            });
            if target_met(kind, tc.target, l, a) {
                reached_target = true;
                break;
            }
        }
    }
    Ok(MlpTrainResult {
        records,
        evals,
        params,
        steps_run,
        samples_seen,
        reached_target,
    })
}

pub const MLP_METRICS_HEADER: &str = "step,loss,accuracy,grad_norm,lr";

pub fn write_mlp_metrics_csv(records: &[MlpRecord], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{MLP_METRICS_HEADER}")?;
    for r in records {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{acc},{},{}", r.step, r.loss, r.grad_norm, r.lr)?;
    }
    Ok(())
}
