use std::path::PathBuf;

use clap::{value_parser, ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(
    name = "sigattn",
    version,
    about = "Sigmoid attention kernels, gradient checks, theory checks and synthetic training runs"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Global {
    /// JSON file of flag values; flags given on the command line win.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, `out/<command>` by default.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, default_value_t = 1, value_parser = value_parser!(u64).range(1..))]
    pub threads: u64,
    /// Format of the table printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Tiled vs reference kernels over a grid of block shapes.
    Equiv(EquivArgs),
    /// Analytic gradients vs central differences across config axes.
    Checkgrad(CheckgradArgs),
    /// Bias solver, Lipschitz bound, contextual mapping, FLOPs, sparsity.
    #[command(subcommand)]
    Theory(TheoryCmd),
    /// Train on a synthetic task.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Time naive and tiled kernels and report auxiliary memory.
    Bench(BenchArgs),
}

impl Command {
    /// Subcommand names from the root, e.g. `["theory", "bias"]`.
    pub fn path(&self) -> Vec<&'static str> {
        match self {
            Command::Equiv(_) => vec!["equiv"],
            Command::Checkgrad(_) => vec!["checkgrad"],
            Command::Theory(t) => vec![
                "theory",
                match t {
                    TheoryCmd::Bias(_) => "bias",
                    TheoryCmd::Lipschitz(_) => "lipschitz",
                    TheoryCmd::Contextual(_) => "contextual",
                    TheoryCmd::Flops(_) => "flops",
                    TheoryCmd::Hoyer(_) => "hoyer",
                },
            ],
            Command::Train(t) => vec![
                "train",
                match t {
                    TrainCmd::Ksum(_) => "ksum",
                    TrainCmd::PairRepeat(_) => "pair-repeat",
                },
            ],
            Command::Bench(_) => vec!["bench"],
        }
    }
}

fn parse_block_pair(s: &str) -> Result<String, String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] if a.parse::<usize>().is_ok_and(|x| x > 0) && b.parse::<usize>().is_ok_and(|x| x > 0) => Ok(s.to_string()),
        _ => Err(format!("expected two positive integers `b_r,b_c`, got `{s}`")),
    }
}

fn parse_block_x(s: &str) -> Result<String, String> {
    match s.split_once('x') {
        Some((a, b)) if a.parse::<usize>().is_ok_and(|x| x > 0) && b.parse::<usize>().is_ok_and(|x| x > 0) => {
            Ok(s.to_string())
        }
        _ => Err(format!("expected `b_rxb_c` with positive integers, got `{s}`")),
    }
}

fn parse_range(s: &str) -> Result<String, String> {
    match s.split_once("..") {
        Some((a, b)) if a.parse::<usize>().is_ok() && b.parse::<usize>().is_ok() => Ok(s.to_string()),
        _ => Err(format!("expected an inclusive range `lo..hi`, got `{s}`")),
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct EquivArgs {
    /// Sequence lengths.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_values_t = [16u64, 130, 257], value_parser = value_parser!(u64).range(1..))]
    pub n: Vec<u64>,
    #[arg(long, default_value_t = 16, value_parser = value_parser!(u64).range(1..))]
    pub d: u64,
    /// A single `b_r,b_c` tiling instead of the {1,3,32,64,n,n+7}² grid.
    #[arg(long, value_parser = parse_block_pair)]
    pub blocks: Option<String>,
    #[arg(long, default_value_t = 1e-10, value_parser = positive_f64)]
    pub tol: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationArg {
    Sigmoid,
    Softmax,
    Relu,
    Tanh,
}

impl From<ActivationArg> for sigattn::attn::Activation {
    fn from(a: ActivationArg) -> Self {
        use sigattn::attn::Activation;
        match a {
            ActivationArg::Sigmoid => Activation::Sigmoid,
            ActivationArg::Softmax => Activation::Softmax,
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct CheckgradArgs {
    /// Restrict the sweep to one activation.
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5, value_parser = positive_f64)]
    pub h: f64,
    /// Tolerance; by default 1e-6 (attention) and 1e-5 (model), scaled by (h/1e-5)² and (h/1e-5)⁴ respectively.
    #[arg(long, value_parser = positive_f64)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 6, value_parser = value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 4, value_parser = value_parser!(u64).range(1..))]
    pub d: u64,
    /// Include the full-model axes.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    pub model: bool,
}

#[derive(Subcommand, Debug)]
pub enum TheoryCmd {
    /// Solve Σσ(zᵢ + b) = 1 for b.
    Bias(BiasArgs),
    /// Jacobian-norm bound vs power-iteration estimate on random instances.
    Lipschitz(LipschitzArgs),
    /// Exhaustive contextual-mapping check of the selective-shift stack.
    Contextual(ContextualArgs),
    /// Forward operations per token per head.
    Flops(FlopsArgs),
    /// Hoyer sparsity of a vector.
    Hoyer(HoyerArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct BiasArgs {
    #[arg(long, default_value_t = 5, value_parser = value_parser!(u64).range(1..))]
    pub n: u64,
    /// Value of every logit when `--zs` is absent.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub z: f64,
    /// Explicit logits; overrides `--n` and `--z`.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', allow_hyphen_values = true)]
    pub zs: Option<Vec<f64>>,
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct LipschitzArgs {
    #[arg(long, default_value_t = 4, value_parser = value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 3, value_parser = value_parser!(u64).range(1..))]
    pub d: u64,
    #[arg(long, default_value_t = 20, value_parser = value_parser!(u64).range(1..))]
    pub instances: u64,
    /// Scale applied to every input row.
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub radius: f64,
    /// Logit offset b.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub bias: f64,
    #[arg(long, default_value_t = 200, value_parser = value_parser!(u64).range(1..))]
    pub iters: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct ContextualArgs {
    /// Grid step, a power of two in [2⁻²⁰, 1/2].
    #[arg(long, default_value_t = 0.5, value_parser = positive_f64)]
    pub delta: f64,
    #[arg(long, default_value_t = 1, value_parser = value_parser!(u64).range(1..))]
    pub d: u64,
    #[arg(long, default_value_t = 2, value_parser = value_parser!(u64).range(1..))]
    pub n: u64,
    /// Shift scale; defaults to the smallest integer above the threshold.
    #[arg(long, value_parser = positive_f64)]
    pub c: Option<f64>,
    /// Run even when c does not exceed the threshold.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 2048, value_parser = value_parser!(u64).range(1..))]
    pub nctx: u64,
    #[arg(long, default_value_t = 64, value_parser = value_parser!(u64).range(1..))]
    pub dhead: u64,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub causal: bool,
    #[arg(long, value_enum, default_value_t = ActivationArg::Sigmoid)]
    pub activation: ActivationArg,
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct HoyerArgs {
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.0, 0.0, 1.0, 0.0])]
    pub values: Vec<f64>,
}

#[derive(Subcommand, Debug)]
pub enum TrainCmd {
    /// Regress the sum of the values picked by a k-hot mask.
    Ksum(KsumArgs),
    /// Classify whether the first two symbols repeat later.
    PairRepeat(PairRepeatArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosArg {
    None,
    Learnable,
    Sincos,
    Rope,
    Alibi,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchArg {
    Transformer,
    Mlp,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

/// Model and optimizer flags shared by both tasks. Unset options take the
/// task's default and are filled in before the config is written.
#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelArgs {
    /// `mlp` trains the fully connected baseline; attention flags are then ignored.
    #[arg(long, value_enum, default_value_t = ArchArg::Transformer)]
    pub arch: ArchArg,
    #[arg(long, value_enum, default_value_t = ActivationArg::Sigmoid)]
    pub attn: ActivationArg,
    /// none | const:<b> | learnable:<b> | neg-log-n | neg-log-row-len.
    #[arg(long, allow_hyphen_values = true)]
    pub bias: Option<String>,
    /// Sequence-length normalization exponent.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub causal: bool,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub qk_norm: Option<bool>,
    #[arg(long, value_enum, default_value_t = PosArg::Learnable)]
    pub pos: PosArg,
    /// LayerScale initial gain; off when absent, 1e-4 when given bare.
    #[arg(long, num_args = 0..=1, default_missing_value = "0.0001", value_parser = positive_f64)]
    pub layerscale: Option<f64>,
    #[arg(long, default_value_t = 32, value_parser = value_parser!(u64).range(1..))]
    pub width: u64,
    #[arg(long, default_value_t = 4, value_parser = value_parser!(u64).range(1..))]
    pub heads: u64,
    #[arg(long, value_parser = value_parser!(u64).range(1..))]
    pub layers: Option<u64>,
    #[arg(long, default_value_t = 4, value_parser = value_parser!(u64).range(1..))]
    pub mlp_ratio: u64,
    #[arg(long)]
    pub init_std: Option<f64>,
    /// Run attention through the tiled kernels.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub flash: bool,
    /// Tile shape `b_r,b_c` for `--flash`.
    #[arg(long, default_value = "128,128", value_parser = parse_block_pair)]
    pub blocks: String,
    #[arg(long, value_parser = value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    #[arg(long, value_parser = value_parser!(u64).range(1..))]
    pub batch: Option<u64>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long, default_value_t = 0.05)]
    pub warmup_frac: f64,
    #[arg(long, value_parser = positive_f64)]
    pub clip: Option<f64>,
    #[arg(long, default_value_t = 50, value_parser = value_parser!(u64).range(1..))]
    pub metrics_every: u64,
    #[arg(long, default_value_t = 250, value_parser = value_parser!(u64).range(1..))]
    pub eval_every: u64,
    #[arg(long, default_value_t = 512, value_parser = value_parser!(u64).range(1..))]
    pub eval_samples: u64,
    /// Stop early once held-out MSE is below (k-sum) or accuracy reaches
    /// (pair-repeat) this value; the run fails if it is never reached.
    #[arg(long)]
    pub target: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct KsumArgs {
    #[arg(long, default_value_t = 10, value_parser = value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 1)]
    pub k: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct PairRepeatArgs {
    #[arg(long, default_value_t = 5, value_parser = value_parser!(u64).range(2..))]
    pub vocab: u64,
    #[arg(long, default_value_t = 8, value_parser = value_parser!(u64).range(4..))]
    pub min_len: u64,
    #[arg(long, default_value_t = 10, value_parser = value_parser!(u64).range(4..))]
    pub max_train_len: u64,
    #[arg(long, default_value_t = 14, value_parser = value_parser!(u64).range(4..))]
    pub max_len: u64,
    /// Inclusive range of lengths to evaluate after training, e.g. `6..14`.
    #[arg(long, value_parser = parse_range)]
    pub eval_lengths: Option<String>,
    #[arg(long, default_value_t = 512, value_parser = value_parser!(u64).range(1..))]
    pub eval_samples_per_length: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct BenchArgs {
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_values_t = [512u64, 2048], value_parser = value_parser!(u64).range(1..))]
    pub n: Vec<u64>,
    #[arg(long, default_value_t = 64, value_parser = value_parser!(u64).range(1..))]
    pub d: u64,
    /// Tile shapes `b_rxb_c`.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_values_t = ["128x128".to_string()], value_parser = parse_block_x)]
    pub blocks: Vec<String>,
    #[arg(long, default_value_t = 5, value_parser = value_parser!(u64).range(3..))]
    pub reps: u64,
    /// Longest sequence the naive kernels are run at.
    #[arg(long, default_value_t = sigattn::flash::DEFAULT_NAIVE_MAX_N as u64)]
    pub naive_max_n: u64,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub causal: bool,
}
