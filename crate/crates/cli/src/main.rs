//! `dmwp`: command-line front end for corpus generation, weak-supervision
//! search, augmentation, training, evaluation, cross-validation and
//! ablations.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime or
//! numeric failure. Every flag can also be set through a `DMWP_*`
//! environment variable; explicit flags win over the environment, which
//! wins over `--config`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmwp_core::{SupervisionMode, TopkMode, Variant};

#[derive(Parser, Debug)]
#[command(name = "dmwp", version, about = "Solution-buffer training for math word problem solvers")]
struct Cli {
    /// Top-level seed; every stochastic component derives from it.
    #[arg(long, global = true, env = "DMWP_SEED")]
    seed: Option<u64>,
    /// Threads for search, beam decoding and evaluation.
    #[arg(long, global = true, env = "DMWP_WORKERS")]
    workers: Option<usize>,
    /// JSON file with training settings; flags override its values.
    #[arg(long, global = true, env = "DMWP_CONFIG")]
    config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic word-problem corpus.
    Synth(SynthArgs),
    /// Search equations for answer-only problems.
    Wda(WdaArgs),
    /// Emit positive and negative solution samples for inspection.
    Augment(AugmentArgs),
    /// Train a solver.
    Train(TrainArgs),
    /// Evaluate a trained solver with top-k answer accuracy.
    Eval(EvalArgs),
    /// K-fold cross-validation.
    Kfold(KfoldArgs),
    /// Compare weighting variants on a held-out fold.
    Ablate(AblateArgs),
    /// Pretty-print one problem's solution buffer.
    InspectBuffer(InspectArgs),
    /// Convert Math23k-style records to the canonical JSONL layout.
    Convert(ConvertArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of problems.
    #[arg(long, default_value_t = 2000, env = "DMWP_N")]
    n: usize,
    /// Comma-separated template ids (default: all).
    #[arg(long, value_delimiter = ',')]
    templates: Vec<String>,
    /// Fraction of problems whose equation is withheld (answer only).
    #[arg(long, default_value_t = 0.0)]
    answer_only: f64,
    /// Output JSONL corpus.
    #[arg(long, env = "DMWP_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct WdaArgs {
    /// Input JSONL corpus.
    #[arg(long, env = "DMWP_INPUT")]
    input: PathBuf,
    /// Iteration budget per problem.
    #[arg(long, env = "DMWP_MAX_ITER")]
    max_iter: Option<usize>,
    /// Search every problem, ignoring gold equations.
    #[arg(long)]
    all: bool,
    /// Output JSONL of per-problem results.
    #[arg(long, env = "DMWP_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Input JSONL corpus (problems with equations are used).
    #[arg(long, env = "DMWP_INPUT")]
    input: PathBuf,
    /// Per-token disturbance probability for negatives.
    #[arg(long, env = "DMWP_LAMBDA")]
    lambda: Option<f64>,
    /// Cap on rule variants per equation.
    #[arg(long)]
    max_positives: Option<usize>,
    /// Negatives per positive.
    #[arg(long)]
    negatives: Option<usize>,
    /// Output JSONL of contrast batches.
    #[arg(long, env = "DMWP_OUT")]
    out: PathBuf,
}

/// Training settings shared by `train`, `kfold` and `ablate`.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// Supervision mode: full, semi-weak or weak (default: inferred from the corpus).
    #[arg(long, env = "DMWP_MODE")]
    mode: Option<SupervisionMode>,
    /// Training epochs.
    #[arg(long, env = "DMWP_EPOCHS")]
    epochs: Option<usize>,
    /// First epoch that mixes discriminator scores into the weights.
    #[arg(long, env = "DMWP_STAGE_SWITCH")]
    stage_switch: Option<usize>,
    /// Epochs between buffer refreshes.
    #[arg(long, env = "DMWP_REFRESH_PERIOD")]
    refresh_period: Option<usize>,
    /// Beam width for refreshes and evaluation.
    #[arg(long, env = "DMWP_BEAM")]
    beam: Option<usize>,
    /// Initial solver learning rate.
    #[arg(long, env = "DMWP_LR")]
    lr: Option<f64>,
    /// Epochs between learning-rate halvings.
    #[arg(long, env = "DMWP_LR_HALVING")]
    lr_halving: Option<usize>,
    /// Problems per optimizer step.
    #[arg(long, env = "DMWP_BATCH_SIZE")]
    batch_size: Option<usize>,
    /// Solver embedding width.
    #[arg(long, env = "DMWP_EMBED_DIM")]
    embed_dim: Option<usize>,
    /// Solver hidden width.
    #[arg(long, env = "DMWP_HIDDEN_DIM")]
    hidden_dim: Option<usize>,
    /// Discriminator learning rate.
    #[arg(long, env = "DMWP_DISC_LR")]
    disc_lr: Option<f64>,
    /// Search budget for weak supervision.
    #[arg(long, env = "DMWP_MAX_ITER")]
    max_iter: Option<usize>,
    /// Seed answer-only problems of a semi-weak corpus by search.
    #[arg(long, env = "DMWP_USE_WDA")]
    use_wda: bool,
    /// Top-k reading: all (every one of the top k beams correct) or any.
    #[arg(long, env = "DMWP_TOPK_MODE")]
    topk_mode: Option<TopkMode>,
    /// Keep at most this many equations per buffer (model-found ones are evicted first).
    #[arg(long, env = "DMWP_BUFFER_CAP")]
    buffer_cap: Option<usize>,
    /// Disturbance probability for discriminator negatives.
    #[arg(long, env = "DMWP_LAMBDA")]
    lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training corpus (JSONL).
    #[arg(long, env = "DMWP_INPUT")]
    input: PathBuf,
    /// Optional held-out corpus evaluated after training.
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
    /// Output directory for metrics, logs, buffers and checkpoints.
    #[arg(long, env = "DMWP_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Solver checkpoint, or a training output directory.
    #[arg(long)]
    model: PathBuf,
    /// Test corpus (JSONL).
    #[arg(long, env = "DMWP_INPUT")]
    input: PathBuf,
    /// Beam width.
    #[arg(long, default_value_t = 5, env = "DMWP_BEAM")]
    beam: usize,
    /// Top-k reading: all or any.
    #[arg(long, default_value = "all", env = "DMWP_TOPK_MODE")]
    topk_mode: TopkMode,
    /// Optional JSON report path.
    #[arg(long, env = "DMWP_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct KfoldArgs {
    /// Corpus (JSONL).
    #[arg(long, env = "DMWP_INPUT")]
    input: PathBuf,
    /// Number of folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[command(flatten)]
    flags: TrainFlags,
    /// Output directory.
    #[arg(long, env = "DMWP_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Corpus (JSONL); fold 0 of `--folds` is held out.
    #[arg(long, env = "DMWP_INPUT")]
    input: PathBuf,
    /// Comma-separated variants: full_method, one_stage, non_probabilistic, gold_only.
    #[arg(long, value_delimiter = ',', default_value = "full_method,one_stage,non_probabilistic")]
    variants: Vec<Variant>,
    /// Number of seeds per variant.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Folds used to pick the held-out split.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[command(flatten)]
    flags: TrainFlags,
    /// Output directory.
    #[arg(long, env = "DMWP_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Buffer file written by `train`.
    #[arg(long)]
    buffers: PathBuf,
    /// Problem id.
    #[arg(long)]
    id: String,
    /// Corpus to render equations with their numbers.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// JSON array or JSONL of Math23k-style records.
    #[arg(long, env = "DMWP_INPUT")]
    input: PathBuf,
    /// Canonical JSONL output.
    #[arg(long, env = "DMWP_OUT")]
    out: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DMWP_LOG", level)).init();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Data(e) | Failure::Runtime(e)) = &f;
            // Error types often embed their source in their own message.
            let mut parts: Vec<String> = Vec::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !parts.last().is_some_and(|prev| prev.contains(&cause)) {
                    parts.push(cause);
                }
            }
            eprintln!("error: {}", parts.join(": "));
            ExitCode::from(f.code())
        }
    }
}
