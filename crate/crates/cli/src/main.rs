use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use serde::Serialize;
use serde_json::{json, Map, Value};

use sigattn::Schedule;

mod cli;
mod commands;
mod config;

use cli::{Cli, Command, Format, TheoryCmd, TrainCmd};

/// Invalid flag values discovered after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Whether a command's checks passed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    pub fn from_pass(pass: bool) -> Self {
        if pass {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }
}

/// Everything a command needs besides its own flags.
pub struct Ctx {
    pub out: PathBuf,
    pub seed: u64,
    pub schedule: Schedule,
    pub format: Format,
}

impl Ctx {
    pub fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        std::fs::write(self.out.join(name), contents)?;
        Ok(())
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `value` with a top-level `"schema": 1`.
    pub fn write_report(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        if let Value::Object(map) = &mut v {
            map.insert("schema".into(), json!(1));
        }
        self.write_json(name, &v)
    }

    /// Prints `csv` or `json` depending on `--format`.
    pub fn emit(&self, csv: &str, json: &impl Serialize) -> Result<()> {
        match self.format {
            Format::Csv => print!("{csv}"),
            Format::Json => println!("{}", serde_json::to_string_pretty(json)?),
        }
        Ok(())
    }
}

fn parse(argv: Vec<OsString>) -> std::result::Result<Cli, clap::Error> {
    let first = Cli::try_parse_from(&argv)?;
    let Some(path) = first.global.config.clone() else {
        return Ok(first);
    };
    let command = first.command.path();
    let flags = config::flags_from_file(&path, &command)
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{e:#}\n")))?;
    Cli::try_parse_from(config::splice(&argv, &command, flags))
}

fn command_args(cmd: &Command) -> Result<Value> {
    Ok(match cmd {
        Command::Equiv(a) => serde_json::to_value(a)?,
        Command::Checkgrad(a) => serde_json::to_value(a)?,
        Command::Theory(TheoryCmd::Bias(a)) => serde_json::to_value(a)?,
        Command::Theory(TheoryCmd::Lipschitz(a)) => serde_json::to_value(a)?,
        Command::Theory(TheoryCmd::Contextual(a)) => serde_json::to_value(a)?,
        Command::Theory(TheoryCmd::Flops(a)) => serde_json::to_value(a)?,
        Command::Theory(TheoryCmd::Hoyer(a)) => serde_json::to_value(a)?,
        Command::Train(TrainCmd::Ksum(a)) => serde_json::to_value(a)?,
        Command::Train(TrainCmd::PairRepeat(a)) => serde_json::to_value(a)?,
        Command::Bench(a) => serde_json::to_value(a)?,
    })
}

/// Flat JSON of every resolved flag plus `schema` and `command`; usable as
/// a `--config` file to replay the run. The output directory is left out so
/// that runs into different directories produce identical files.
fn resolved_config(cli: &Cli) -> Result<Value> {
    let mut map = Map::new();
    map.insert("schema".into(), json!(1));
    map.insert("command".into(), json!(cli.command.path().join(" ")));
    let Value::Object(global) = serde_json::to_value(&cli.global)? else {
        unreachable!("globals serialize to an object");
    };
    map.extend(global);
    if let Value::Object(args) = command_args(&cli.command)? {
        map.extend(args);
    }
    Ok(Value::Object(map))
}

fn run(mut cli: Cli) -> Result<Outcome> {
    let threads = cli.global.threads as usize;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    let schedule = if threads > 1 {
        Schedule::Parallel
    } else {
        Schedule::Sequential
    };
    commands::resolve_defaults(&mut cli.command)?;
    let out = cli
        .global
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(cli.command.path().join("-")));
    std::fs::create_dir_all(&out)?;
    let ctx = Ctx {
        out: out.clone(),
        seed: cli.global.seed,
        schedule,
        format: cli.global.format,
    };
    ctx.write_json("config.json", &resolved_config(&cli)?)?;
    commands::dispatch(&cli.command, &ctx)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<sigattn::Error>() {
        Some(
            sigattn::Error::InvalidArgument(_)
            | sigattn::Error::ShapeMismatch { .. }
            | sigattn::Error::Unsupported(_)
            | sigattn::Error::BudgetExceeded { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
