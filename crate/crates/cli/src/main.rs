//! `ditm`: score, train, eval, synth and gradcheck subcommands.
//!
//! Exit codes: 0 success, 1 check failure (failed gradient check or
//! diverged training), 2 usage or I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ditm::corpus::Split;
use ditm::losses::Objective;

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug)]
pub struct CheckFailure(pub String);

impl std::fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailure {}

#[derive(Parser, Debug)]
#[command(name = "ditm", version, about = "Descriptiveness-aware image-text matching toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score corpus descriptiveness against a document pool.
    Score(ScoreArgs),
    /// Train projections on precomputed features.
    Train(TrainArgs),
    /// Evaluate a checkpoint: recalls, RSUM, hierarchy metrics.
    Eval(EvalArgs),
    /// Generate a synthetic hierarchical corpus and features.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeatureArgs {
    /// Directory holding image_features.json and text_features.json.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    image_features: Option<PathBuf>,
    #[arg(long)]
    text_features: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Split used as the document pool.
    #[arg(long)]
    pool_split: Option<Split>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainPreset {
    /// 10 epochs, batches of 64, lr 1e-2.
    Quick,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Descriptiveness table from `ditm score`; computed from the train
    /// split when omitted.
    #[arg(long)]
    table: Option<PathBuf>,
    #[command(flatten)]
    features: FeatureArgs,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    val_split: Option<Split>,
    /// Continue from a checkpoint; its stored config is used unchanged.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    save_every: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<TrainPreset>,
    /// triplet, adaptive_triplet (or adaptive), overall.
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    features: FeatureArgs,
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthPreset {
    /// Default sizes with the lexical text component enabled.
    Ablation,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    preset: Option<SynthPreset>,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    shared_vocab: Option<usize>,
    #[arg(long)]
    rare_vocab: Option<usize>,
    #[arg(long)]
    words_per_level: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    lexical_weight: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(a) => commands::score(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Synth(a) => commands::synth(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<CheckFailure>().is_some()
                || matches!(
                    e.downcast_ref::<ditm::Error>(),
                    Some(ditm::Error::NonFiniteLoss { .. })
                )
            {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
