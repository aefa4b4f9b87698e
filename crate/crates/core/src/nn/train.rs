use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ops::frobenius_norm;
use crate::parallel::Schedule;
use crate::rng::Rng;
use crate::theory::hoyer_sparsity;

use super::config::{InputKind, ModelConfig};
use super::model::{loss_and_grad, loss_terms, model_forward_with, Loss};
use super::optim::{adam_step, AdamConfig, AdamState};
use super::params::ModelParams;
use super::tasks::{gen_ksum, gen_pair_repeat, TaskBatch, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskSpec {
    Ksum {
        n: usize,
        k: usize,
    },
    PairRepeat {
        vocab: usize,
        min_len: usize,
        max_train_len: usize,
        max_len: usize,
    },
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::Ksum { .. } => TaskKind::Ksum,
            TaskSpec::PairRepeat { .. } => TaskKind::PairRepeat,
        }
    }

    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Result<TaskBatch> {
        match *self {
            TaskSpec::Ksum { n, k } => gen_ksum(n, k, batch, rng),
            TaskSpec::PairRepeat {
                vocab,
                min_len,
                max_train_len,
                max_len,
            } => gen_pair_repeat(vocab, (min_len, max_train_len), max_len, batch, rng),
        }
    }

    /// Model config with the input kind and length this task needs.
    /// k-summation feeds `2n` scalar tokens; pair-repeat adds the padding
    /// symbol to the vocabulary.
    pub fn model_config(&self) -> ModelConfig {
        match *self {
            TaskSpec::Ksum { n, .. } => ModelConfig::new(InputKind::Scalar, 2 * n),
            TaskSpec::PairRepeat { vocab, max_len, .. } => ModelConfig::new(InputKind::Vocab(vocab + 1), max_len),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup_frac` of the steps, then cosine decay to 0.
    WarmupCosine { warmup_frac: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::WarmupCosine { warmup_frac } => {
                let warm = ((warmup_frac * total as f64).ceil() as usize).max(1);
                if step < warm {
                    base * (step + 1) as f64 / warm as f64
                } else {
                    let span = total.saturating_sub(warm).max(1) as f64;
                    let progress = ((step - warm) as f64 / span).min(1.0);
                    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Rescale gradients whose global norm exceeds this.
    pub clip: Option<f64>,
    pub metrics_every: usize,
    pub eval_every: usize,
    /// Size of the fixed held-out set drawn once before training.
    pub eval_samples: usize,
    /// Stop once held-out MSE drops below (regression) or held-out accuracy
    /// reaches (classification) this value.
    pub target: Option<f64>,
    pub parallel: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 32,
            lr: 1e-3,
            schedule: LrSchedule::Constant,
            adam: AdamConfig::default(),
            clip: None,
            metrics_every: 10,
            eval_every: 100,
            eval_samples: 512,
            target: None,
            parallel: Schedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.metrics_every == 0 || self.eval_every == 0 || self.eval_samples == 0 {
            return Err(invalid("steps, batch, metrics_every, eval_every and eval_samples must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if let LrSchedule::WarmupCosine { warmup_frac } = self.schedule {
            if !(0.0..=1.0).contains(&warmup_frac) {
                return Err(invalid("warmup_frac must lie in [0, 1]"));
            }
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(invalid("clip must be > 0"));
        }
        Ok(())
    }
}

/// One training-step row. Attention columns have one entry per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Mean Frobenius norm of the post-activation attention matrices.
    pub attn_norm: Vec<f64>,
    /// Mean Hoyer sparsity of the post-activation attention rows.
    pub hoyer: Vec<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Number of optimizer steps taken.
    pub step: usize,
    pub samples_seen: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub records: Vec<MetricsRecord>,
    pub evals: Vec<EvalPoint>,
    pub params: ModelParams,
    pub steps_run: usize,
    pub samples_seen: usize,
    pub reached_target: bool,
}

impl TrainResult {
    pub fn final_eval(&self) -> EvalPoint {
        *self.evals.last().expect("training always evaluates at least once")
    }
}

/// Per-layer attention norm and Hoyer sparsity, averaged over every
/// (sample, head) matrix and every row with at least two entries.
pub fn attention_metrics(attention: &[Vec<crate::matrix::Matrix>]) -> (Vec<f64>, Vec<f64>) {
    let mut norms = Vec::with_capacity(attention.len());
    let mut hoyers = Vec::with_capacity(attention.len());
    for mats in attention {
        let norm = mats.iter().map(frobenius_norm).sum::<f64>() / mats.len().max(1) as f64;
        let (mut total, mut count) = (0.0, 0usize);
        for m in mats {
            for i in 0..m.rows() {
                // all-zero rows (possible under ReLU) have no defined sparsity
                if let Ok(h) = hoyer_sparsity(m.row(i)) {
                    total += h;
                    count += 1;
                }
            }
        }
        norms.push(norm);
        hoyers.push(if count == 0 { 0.0 } else { total / count as f64 });
    }
    (norms, hoyers)
}

/// Mean loss and accuracy on `batch`, evaluated in chunks.
pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, batch: &TaskBatch, schedule: Schedule) -> Result<(f64, Option<f64>)> {
    const CHUNK: usize = 256;
    let n = batch.len();
    let mut predictions = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let out = model_forward_with(params, cfg, &batch.inputs.slice_rows(start, len), schedule)?;
        predictions.extend(out.predictions);
    }
    let (loss, _, acc) = loss_terms(Loss::for_task(batch.kind), &predictions, &batch.targets);
    Ok((loss, acc))
}

fn target_met(kind: TaskKind, target: Option<f64>, loss: f64, acc: Option<f64>) -> bool {
    match (target, kind) {
        (Some(t), TaskKind::Ksum) => loss < t,
        (Some(t), TaskKind::PairRepeat) => acc.is_some_and(|a| a >= t),
        (None, _) => false,
    }
}

/// Adam on freshly generated batches. Parameter init, training data and the
/// held-out set use independent streams forked from `rng`, so a run is a
/// function of its seed and configs.
pub fn train(task: &TaskSpec, model: &ModelConfig, tc: &TrainConfig, rng: &Rng) -> Result<TrainResult> {
    tc.validate()?;
    model.validate()?;
    let mut params = ModelParams::init(model, &mut rng.fork(1))?;
    let mut data_rng = rng.fork(2);
    let eval_set = task.sample(tc.eval_samples, &mut rng.fork(3))?;
    let kind = task.kind();
    let metrics_model = ModelConfig {
        use_flash: false,
        ..model.clone()
    };

    let mut state = AdamState::new(&params);
    let mut records = Vec::new();
    let mut evals = Vec::new();
    let mut samples_seen = 0;
    let mut reached_target = false;
    let mut steps_run = 0;
    for step in 0..tc.steps {
        let batch = task.sample(tc.batch, &mut data_rng)?;
        let mut lg = loss_and_grad(&params, model, &batch, tc.parallel)?;
        if !lg.loss.is_finite() {
            return Err(Error::Diverged { step, loss: lg.loss });
        }
        let grad_norm = lg.grads.l2_norm();
        let lr = tc.schedule.lr_at(tc.lr, step, tc.steps);
        if step % tc.metrics_every == 0 || step + 1 == tc.steps {
            let attention = if model.use_flash {
                model_forward_with(&params, &metrics_model, &batch.inputs, tc.parallel)?.attention
            } else {
                std::mem::take(&mut lg.output.attention)
            };
            let (attn_norm, hoyer) = attention_metrics(&attention);
            records.push(MetricsRecord {
                step,
                loss: lg.loss,
                accuracy: lg.accuracy,
                attn_norm,
                hoyer,
                grad_norm,
                lr,
            });
        }
        if let Some(c) = tc.clip {
            if grad_norm > c {
                lg.grads.scale_in_place(c / grad_norm);
            }
        }
        adam_step(&mut params, &lg.grads, &mut state, lr, &tc.adam);
        samples_seen += tc.batch;
        steps_run = step + 1;
        if steps_run % tc.eval_every == 0 || steps_run == tc.steps {
            let (loss, accuracy) = evaluate(&params, model, &eval_set, tc.parallel)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            evals.push(EvalPoint {
                step: steps_run,
                samples_seen,
                loss,
                accuracy,
            });
            if target_met(kind, tc.target, loss, accuracy) {
                reached_target = true;
                break;
            }
        }
    }
    Ok(TrainResult {
        records,
        evals,
        params,
        steps_run,
        samples_seen,
        reached_target,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthAccuracy {
    pub length: usize,
    pub samples: usize,
    pub accuracy: f64,
}

/// Pair-repeat accuracy on fresh sequences of each requested length.
pub fn eval_length_generalization(
    params: &ModelParams,
    cfg: &ModelConfig,
    vocab: usize,
    lengths: &[usize],
    samples: usize,
    rng: &mut Rng,
) -> Result<Vec<LengthAccuracy>> {
    if samples == 0 {
        return Ok(Vec::new());
    }
    if let Some(&l) = lengths.iter().find(|&&l| l > cfg.max_len || l < 4) {
        return Err(invalid(format!("length {l} outside 4..={}", cfg.max_len)));
    }
    lengths
        .iter()
        .map(|&length| {
            let batch = gen_pair_repeat(vocab, (length, length), cfg.max_len, samples, rng)?;
            let (_, acc) = evaluate(params, cfg, &batch, Schedule::default())?;
            Ok(LengthAccuracy {
                length,
                samples,
                accuracy: acc.unwrap_or(f64::NAN),
            })
        })
        .collect()
}

/// Header of the metrics CSV for a model with `layers` blocks.
pub fn metrics_csv_header(layers: usize) -> String {
    let mut cols = vec!["step".to_string(), "loss".into(), "accuracy".into()];
    cols.extend((0..layers).map(|l| format!("attn_norm_layer_{l}")));
    cols.extend((0..layers).map(|l| format!("hoyer_layer_{l}")));
    cols.extend(["grad_norm".into(), "lr".into()]);
    cols.join(",")
}

pub fn write_metrics_csv(records: &[MetricsRecord], layers: usize, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{}", metrics_csv_header(layers))?;
    for r in records {
        let mut cols = vec![r.step.to_string(), r.loss.to_string(), r.accuracy.map_or(String::new(), |a| a.to_string())];
        cols.extend(r.attn_norm.iter().map(f64::to_string));
        cols.extend(r.hoyer.iter().map(f64::to_string));
        cols.extend([r.grad_norm.to_string(), r.lr.to_string()]);
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_cosine_shape() {
        let s = LrSchedule::WarmupCosine { warmup_frac: 0.05 };
        assert!((s.lr_at(1e-3, 0, 100) - 2e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(1e-3, 4, 100), 1e-3);
        assert_eq!(s.lr_at(1e-3, 5, 100), 1e-3);
        assert!(s.lr_at(1e-3, 99, 100) < 1e-6);
        assert_eq!(LrSchedule::Constant.lr_at(0.1, 50, 100), 0.1);
    }

    #[test]
    fn csv_header_lists_layers() {
        assert_eq!(
            metrics_csv_header(2),
            "step,loss,accuracy,attn_norm_layer_0,attn_norm_layer_1,hoyer_layer_0,hoyer_layer_1,grad_norm,lr"
        );
    }
}
