//! `offclip`: data generation, training, evaluation, report filtering,
//! gradient verification and the ablation driver.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "offclip", version, about = "Off-diagonal contrastive training toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct GlobalArgs {
    /// Replaces every seed in the effective configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs and the run manifest [default: out].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Args)]
struct ConfigArgs {
    /// TOML file with optional [synthetic] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.FIELD=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    GenData(GenDataArgs),
    /// Train the encoders and score the held-out split.
    Train(TrainArgs),
    /// Zero-shot AUC and FP/FN balance from a checkpoint or a scores file.
    Eval(EvalArgs),
    /// Label, aggregate and filter a report corpus.
    FilterReports(FilterArgs),
    /// Pointing-game success rates for attention maps.
    PointingGame(PointingArgs),
    /// Finite-difference verification of every loss gradient.
    LossCheck(LossCheckArgs),
    /// Six-row ablation over filtering and the two loss terms.
    Ablation(AblationArgs),
    /// Re-run a recorded command and compare its outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by gen-data; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write a checkpoint every N epochs.
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["scores", "checkpoint"]))]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Scores CSV with id, truth, normal_score and abnormal_score columns.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Model checkpoint to score the held-out split with.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory; generated from the config when absent.
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// Input corpus (line-delimited JSON).
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Filtered corpus [default: <out-dir>/filtered.jsonl].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Lexicon TOML; the built-in lexicon when absent.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Externally predicted sentence labels, applied before the lexicon.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Filtering statistics [default: <out-dir>/filter_stats.json].
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PointingArgs {
    /// Line-delimited grounding records.
    #[arg(long)]
    grounding: PathBuf,
    /// Fraction of pixels selected; comma-separated or repeated.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    top_fraction: Vec<f64>,
}

#[derive(Debug, Args)]
struct LossCheckArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    batch_sizes: Vec<usize>,
    /// Random instances per batch size.
    #[arg(long, default_value_t = 5)]
    per_size: usize,
    /// Similarity entries are drawn uniformly from [-scale, scale].
    #[arg(long, default_value_t = 4.0)]
    scale: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_ab: f64,
}

#[derive(Debug, Args)]
struct AblationArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seeds for data and training; results are averaged [default: 7,11,13, or --seed].
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Manifest written by an earlier run.
    manifest: PathBuf,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let ctx = commands::Ctx::new(&cli.global, argv[1..].to_vec());
    match commands::execute(&ctx, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Check(e)) => {
            eprintln!("check failed: {e:#}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
