use std::fmt::Write as _;

use anyhow::Result;
use serde_json::json;

use sigattn::attn::{Activation, AttnConfig, BiasMode};
use sigattn::flash::{equivalence_suite, kernel_bench, BenchOptions, BenchReport, BlockSpec};
use sigattn::gradcheck::{checkgrad_suite, GradCheckOptions};
use sigattn::nn::{
    eval_length_generalization, matched_width, mlp_input_dim, mlp_scalars, save_params, train, train_mlp,
    write_metrics_csv, write_mlp_metrics_csv, EvalPoint, LrSchedule, ModelConfig, ModelParams, PosEncoding, TaskSpec,
    TrainConfig, KSUM_MLP_HIDDEN,
};
use sigattn::theory::{
    c_threshold, contextual_mapping_check, flop_count, hoyer_sparsity, lipschitz_check, solve_bias, SOLVE_BIAS_TOL,
};
use sigattn::ops::sigmoid_via_tanh;
use sigattn::Rng;

use crate::cli::{
    ActivationArg, ArchArg, BenchArgs, CheckgradArgs, Command, EquivArgs, ModelArgs, PosArg, ScheduleArg, TheoryCmd, TrainCmd,
};
use crate::{usage, Ctx, Outcome};

/// Task defaults for every model flag left unset.
pub fn resolve_defaults(cmd: &mut Command) -> Result<()> {
    let Command::Train(t) = cmd else {
        return Ok(());
    };
    let (m, pair) = match t {
        TrainCmd::Ksum(a) => (&mut a.model, false),
        TrainCmd::PairRepeat(a) => (&mut a.model, true),
    };
    let sigmoid = m.attn == ActivationArg::Sigmoid;
    m.bias.get_or_insert_with(|| match (sigmoid, pair) {
        (false, _) => "none".into(),
        (true, false) => "const:-4".into(),
        (true, true) => "learnable:-4".into(),
    });
    m.qk_norm.get_or_insert(pair);
    m.layers.get_or_insert(if pair { 2 } else { 1 });
    m.init_std.get_or_insert(if pair { 0.1 } else { 0.02 });
    m.steps.get_or_insert(if pair { 31_250 } else { 20_000 });
    m.batch.get_or_insert(if pair { 16 } else { 32 });
    m.schedule.get_or_insert(if pair { ScheduleArg::Cosine } else { ScheduleArg::Constant });
    Ok(())
}

pub fn dispatch(cmd: &Command, ctx: &Ctx) -> Result<Outcome> {
    match cmd {
        Command::Equiv(a) => equiv(a, ctx),
        Command::Checkgrad(a) => checkgrad(a, ctx),
        Command::Theory(t) => theory(t, ctx),
        Command::Train(t) => train_cmd(t, ctx),
        Command::Bench(a) => bench(a, ctx),
    }
}

fn parse_pair(s: &str, sep: char) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(sep).ok_or_else(|| usage(format!("malformed pair `{s}`")))?;
    Ok((a.parse()?, b.parse()?))
}

fn equiv(a: &EquivArgs, ctx: &Ctx) -> Result<Outcome> {
    let blocks = match &a.blocks {
        Some(s) => {
            let (r, c) = parse_pair(s, ',')?;
            Some(BlockSpec::new(r, c)?)
        }
        None => None,
    };
    let ns: Vec<usize> = a.n.iter().map(|&n| n as usize).collect();
    let rows = equivalence_suite(&ns, a.d as usize, blocks, ctx.seed)?;
    let mut csv = String::from("n,config,tilings,forward_err,backward_err,pass\n");
    let mut all = true;
    let mut json_rows = Vec::new();
    for r in &rows {
        let pass = r.forward_err <= a.tol && r.backward_err <= a.tol;
        all &= pass;
        writeln!(csv, "{},{},{},{:e},{:e},{}", r.n, r.config, r.tilings, r.forward_err, r.backward_err, pass)?;
        json_rows.push(json!({"row": r, "pass": pass}));
    }
    ctx.write("equiv.csv", csv.as_bytes())?;
    let report = json!({"tol": a.tol, "pass": all, "rows": json_rows});
    ctx.write_report("report.json", &report)?;
    ctx.emit(&csv, &report)?;
    Ok(Outcome::from_pass(all))
}

fn checkgrad(a: &CheckgradArgs, ctx: &Ctx) -> Result<Outcome> {
    let opts = GradCheckOptions {
        activation: a.activation.map(Activation::from),
        h: a.h,
        tol: a.tol,
        n: a.n as usize,
        d: a.d as usize,
        include_model: a.model,
        seed: ctx.seed,
    };
    let rows = checkgrad_suite(&opts)?;
    let mut csv = String::from("axis,worst_rel_err,tolerance,pass\n");
    for r in &rows {
        writeln!(csv, "{},{:e},{:e},{}", r.axis, r.worst_rel_err, r.tolerance, r.pass)?;
    }
    let all = rows.iter().all(|r| r.pass);
    ctx.write("checkgrad.csv", csv.as_bytes())?;
    let report = json!({"h": a.h, "pass": all, "rows": rows});
    ctx.write_report("report.json", &report)?;
    ctx.emit(&csv, &report)?;
    Ok(Outcome::from_pass(all))
}

fn theory(t: &TheoryCmd, ctx: &Ctx) -> Result<Outcome> {
    match t {
        TheoryCmd::Bias(a) => {
            let z = match &a.zs {
                Some(zs) if zs.is_empty() => return Err(usage("--zs needs at least one value")),
                Some(zs) => zs.clone(),
                None => vec![a.z; a.n as usize],
            };
            let b = solve_bias(&z, SOLVE_BIAS_TOL)?;
            let residual = z.iter().map(|&zi| sigmoid_via_tanh(zi + b)).sum::<f64>() - 1.0;
            let pass = residual.abs() <= 1e-10;
            let csv = format!("n,b,residual\n{},{b},{residual:e}\n", z.len());
            let report = json!({"n": z.len(), "z": z, "b": b, "residual": residual, "pass": pass});
            ctx.write_report("report.json", &report)?;
            ctx.emit(&csv, &report)?;
            Ok(Outcome::from_pass(pass))
        }
        TheoryCmd::Lipschitz(a) => {
            let mut csv = String::from("instance,radius,bound,estimate,ratio,pass\n");
            let mut rows = Vec::new();
            for i in 0..a.instances {
                let seed = Rng::new(ctx.seed).fork(i).next_u64();
                let r = lipschitz_check(a.n as usize, a.d as usize, a.radius, a.bias, a.iters as usize, seed)?;
                writeln!(csv, "{i},{},{},{},{},{}", r.radius, r.bound, r.estimate, r.ratio, r.pass)?;
                rows.push(r);
            }
            let all = rows.iter().all(|r| r.pass);
            let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
            ctx.write("lipschitz.csv", csv.as_bytes())?;
            let report = json!({"pass": all, "max_ratio": max_ratio, "rows": rows});
            ctx.write_report("report.json", &report)?;
            ctx.emit(&csv, &report)?;
            Ok(Outcome::from_pass(all))
        }
        TheoryCmd::Contextual(a) => {
            let (d, n) = (a.d as usize, a.n as usize);
            let threshold = c_threshold(a.delta, d, n)?;
            let c = a.c.unwrap_or(threshold.floor() + 1.0);
            let report = contextual_mapping_check(a.delta, d, n, c, a.force, ctx.schedule)?;
            let csv = format!(
                "delta,d,n,c,threshold,sequences,property_i,property_ii,min_separation,all_hold\n{},{},{},{},{},{},{},{},{:e},{}\n",
                report.delta,
                report.d,
                report.n,
                report.c,
                report.threshold,
                report.sequences,
                report.property_i,
                report.property_ii,
                report.min_separation,
                report.all_hold
            );
            ctx.write_report("report.json", &report)?;
            ctx.emit(&csv, &report)?;
            if report.all_hold {
                eprintln!("both properties hold over {} sequences", report.sequences);
            } else {
                for f in report.failures.iter().take(10) {
                    eprintln!("failure: {f}");
                }
            }
            Ok(Outcome::from_pass(report.all_hold))
        }
        TheoryCmd::Flops(a) => {
            let act = Activation::from(a.activation);
            let f = flop_count(a.nctx as usize, a.dhead as usize, a.causal, act)?;
            let csv = format!(
                "nctx,dhead,causal,logits,softmax,sigmoid,activation,delta\n{},{},{},{},{},{},{},{}\n",
                a.nctx, a.dhead, a.causal, f.logits, f.softmax, f.sigmoid, f.activation, f.delta
            );
            ctx.write_report("report.json", &f)?;
            ctx.emit(&csv, &f)?;
            Ok(Outcome::Pass)
        }
        TheoryCmd::Hoyer(a) => {
            let h = hoyer_sparsity(&a.values)?;
            let csv = format!("len,hoyer\n{},{h}\n", a.values.len());
            let report = json!({"values": a.values, "hoyer": h});
            ctx.write_report("report.json", &report)?;
            ctx.emit(&csv, &report)?;
            Ok(Outcome::Pass)
        }
    }
}

fn parse_bias(s: &str) -> Result<BiasMode> {
    let value = |v: &str| -> Result<f64> {
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| usage(format!("bias value `{v}` is not a finite number")))
    };
    Ok(match s {
        "none" => BiasMode::None,
        "neg-log-n" => BiasMode::NegLogN,
        "neg-log-row-len" => BiasMode::NegLogRowLen,
        _ => match s.split_once(':') {
            Some(("const", v)) => BiasMode::Constant(value(v)?),
            Some(("learnable", v)) => BiasMode::Learnable(value(v)?),
            _ => {
                return Err(usage(format!(
                    "unknown bias `{s}`; expected none, const:<b>, learnable:<b>, neg-log-n or neg-log-row-len"
                )))
            }
        },
    })
}

fn build_model(task: &TaskSpec, m: &ModelArgs) -> Result<ModelConfig> {
    let mut cfg = task.model_config();
    let attn = match m.attn {
        ActivationArg::Softmax => AttnConfig::softmax(),
        other => AttnConfig {
            activation: other.into(),
            ..AttnConfig::sigmoid()
        },
    };
    cfg.attn = attn
        .with_bias(parse_bias(m.bias.as_deref().unwrap_or("none"))?)
        .with_alpha(m.alpha)
        .with_causal(m.causal)
        .with_qk_norm(m.qk_norm.unwrap_or(false));
    cfg.pos = match m.pos {
        PosArg::None => PosEncoding::None,
        PosArg::Learnable => PosEncoding::Learnable,
        PosArg::Sincos => PosEncoding::SinCos,
        PosArg::Rope => PosEncoding::Rope,
        PosArg::Alibi => PosEncoding::Alibi,
    };
    cfg.layerscale = m.layerscale;
    cfg.d_model = m.width as usize;
    cfg.heads = m.heads as usize;
    cfg.layers = m.layers.unwrap_or(1) as usize;
    cfg.mlp_ratio = m.mlp_ratio as usize;
    cfg.init_std = m.init_std.unwrap_or(0.02);
    cfg.use_flash = m.flash;
    let (r, c) = parse_pair(&m.blocks, ',')?;
    cfg.flash_blocks = BlockSpec::new(r, c)?;
    cfg.validate()?;
    Ok(cfg)
}

fn build_train(m: &ModelArgs, ctx: &Ctx) -> TrainConfig {
    TrainConfig {
        steps: m.steps.unwrap_or(1) as usize,
        batch: m.batch.unwrap_or(1) as usize,
        lr: m.lr,
        schedule: match m.schedule.unwrap_or(ScheduleArg::Constant) {
            ScheduleArg::Constant => LrSchedule::Constant,
            ScheduleArg::Cosine => LrSchedule::WarmupCosine {
                warmup_frac: m.warmup_frac,
            },
        },
        clip: m.clip,
        metrics_every: m.metrics_every as usize,
        eval_every: m.eval_every as usize,
        eval_samples: m.eval_samples as usize,
        target: m.target,
        parallel: ctx.schedule,
        ..TrainConfig::default()
    }
}

fn train_cmd(t: &TrainCmd, ctx: &Ctx) -> Result<Outcome> {
    let (task, m) = match t {
        TrainCmd::Ksum(a) => (
            TaskSpec::Ksum {
                n: a.n as usize,
                k: a.k as usize,
            },
            &a.model,
        ),
        TrainCmd::PairRepeat(a) => (
            TaskSpec::PairRepeat {
                vocab: a.vocab as usize,
                min_len: a.min_len as usize,
                max_train_len: a.max_train_len as usize,
                max_len: a.max_len as usize,
            },
            &a.model,
        ),
    };
    let model = build_model(&task, m)?;
    let tc = build_train(m, ctx);
    tc.validate()?;
    let rng = Rng::new(ctx.seed);
    if m.arch == ArchArg::Mlp {
        return train_mlp_cmd(&task, &model, &tc, &rng, ctx);
    }
    let result = train(&task, &model, &tc, &rng)?;

    let mut metrics = Vec::new();
    write_metrics_csv(&result.records, model.layers, &mut metrics)?;
    ctx.write("metrics.csv", &metrics)?;
    write_evals(&result.evals, ctx)?;
    save_params(&result.params, &model, &ctx.out, "params")?;

    let mut lengths = None;
    if let TrainCmd::PairRepeat(a) = t {
        if let Some(range) = &a.eval_lengths {
            let (lo, hi) = range.split_once("..").ok_or_else(|| usage(format!("malformed range `{range}`")))?;
            let (lo, hi): (usize, usize) = (lo.parse()?, hi.parse()?);
            if lo > hi {
                return Err(usage(format!("empty length range `{range}`")));
            }
            let ls: Vec<usize> = (lo..=hi).collect();
            let rows = eval_length_generalization(
                &result.params,
                &model,
                a.vocab as usize,
                &ls,
                a.eval_samples_per_length as usize,
                &mut rng.fork(4),
            )?;
            let mut csv = String::from("length,samples,accuracy\n");
            for r in &rows {
                writeln!(csv, "{},{},{}", r.length, r.samples, r.accuracy)?;
            }
            ctx.write("lengths.csv", csv.as_bytes())?;
            lengths = Some(rows);
        }
    }

    let last = result.final_eval();
    let summary = json!({
        "task": task,
        "model": model,
        "train": tc,
        "steps_run": result.steps_run,
        "samples_seen": result.samples_seen,
        "final_loss": last.loss,
        "final_accuracy": last.accuracy,
        "reached_target": result.reached_target,
        "lengths": lengths,
    });
    ctx.write_report("summary.json", &summary)?;
    let acc = last.accuracy.map(|a| a.to_string()).unwrap_or_default();
    let csv = format!(
        "steps_run,samples_seen,final_loss,final_accuracy,reached_target\n{},{},{},{acc},{}\n",
        result.steps_run, result.samples_seen, last.loss, result.reached_target
    );
    ctx.emit(&csv, &summary)?;
    Ok(Outcome::from_pass(tc.target.is_none() || result.reached_target))
}

fn write_evals(evals: &[EvalPoint], ctx: &Ctx) -> Result<()> {
    let mut csv = String::from("step,samples_seen,loss,accuracy\n");
    for e in evals {
        let acc = e.accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(csv, "{},{},{},{acc}", e.step, e.samples_seen, e.loss)?;
    }
    ctx.write("evals.csv", csv.as_bytes())
}

/// k-summation uses fixed hidden widths; pair-repeat matches the scalar count
/// of the transformer `model` describes.
fn mlp_hidden(task: &TaskSpec, model: &ModelConfig) -> Result<Vec<usize>> {
    Ok(match task {
        TaskSpec::Ksum { .. } => KSUM_MLP_HIDDEN.to_vec(),
        TaskSpec::PairRepeat { .. } => {
            let target = ModelParams::init(model, &mut Rng::new(0))?.num_scalars();
            let h = matched_width(mlp_input_dim(task), target);
            vec![h, h]
        }
    })
}

fn train_mlp_cmd(task: &TaskSpec, model: &ModelConfig, tc: &TrainConfig, rng: &Rng, ctx: &Ctx) -> Result<Outcome> {
    let hidden = mlp_hidden(task, model)?;
    let result = train_mlp(task, &hidden, tc, rng)?;
    let mut metrics = Vec::new();
    write_mlp_metrics_csv(&result.records, &mut metrics)?;
    ctx.write("metrics.csv", &metrics)?;
    write_evals(&result.evals, ctx)?;
    ctx.write_report("params.json", &result.params)?;

    let last = result.evals.last().cloned().ok_or_else(|| anyhow::anyhow!("no evaluation recorded"))?;
    let summary = json!({
        "task": task,
        "arch": "mlp",
        "hidden": hidden,
        "scalars": mlp_scalars(mlp_input_dim(task), &hidden),
        "train": tc,
        "steps_run": result.steps_run,
        "samples_seen": result.samples_seen,
        "final_loss": last.loss,
        "final_accuracy": last.accuracy,
        "reached_target": result.reached_target,
    });
    ctx.write_report("summary.json", &summary)?;
    let acc = last.accuracy.map(|a| a.to_string()).unwrap_or_default();
    let csv = format!(
        "steps_run,samples_seen,final_loss,final_accuracy,reached_target\n{},{},{},{acc},{}\n",
        result.steps_run, result.samples_seen, last.loss, result.reached_target
    );
    ctx.emit(&csv, &summary)?;
    Ok(Outcome::from_pass(tc.target.is_none() || result.reached_target))
}

fn bench(a: &BenchArgs, ctx: &Ctx) -> Result<Outcome> {
    let opts = BenchOptions {
        reps: a.reps as usize,
        naive_max_n: a.naive_max_n as usize,
        schedule: ctx.schedule,
        causal: a.causal,
        seed: ctx.seed,
    };
    let mut report = BenchReport::default();
    for &n in &a.n {
        for b in &a.blocks {
            let (r, c) = parse_pair(b, 'x')?;
            let part = kernel_bench(n as usize, a.d as usize, BlockSpec::new(r, c)?, &opts)?;
            report.rows.extend(part.rows);
        }
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv, true)?;
    ctx.write("bench.csv", &csv)?;
    ctx.write_report("report.json", &report)?;
    ctx.emit(std::str::from_utf8(&csv)?, &report)?;
    Ok(Outcome::Pass)
}
