//! `sift`: preference store, reward head training and corpus compression.
//!
//! Settings resolve in this order: command-line flag, the subcommand's
//! table in the `--config` TOML file (e.g. `[train] learning_rate = 1e-4`),
//! the environment variable `SIFT_<SUBCOMMAND>_<KEY>` (e.g.
//! `SIFT_TRAIN_LEARNING_RATE`), then the built-in default. Input and output
//! paths are flags only.
//!
//! Failures print one line, `sift: error[Name]: message`, and exit 2 for
//! usage or configuration mistakes, 1 otherwise.

mod commands;
mod error;
mod provenance;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use crate::error::CliError;
use crate::settings::List;

#[derive(Parser, Debug)]
#[command(name = "sift", version, about = "Preference-trained filtering for image-text corpora")]
struct Cli {
    /// TOML file with one table per subcommand.
    #[arg(long, global = true, env = "SIFT_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages. Results do not depend on it.
    #[arg(long, global = true, env = "SIFT_WORKERS")]
    workers: Option<usize>,
    /// More log output on stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create an empty preference store log.
    InitStore(InitStoreArgs),
    /// Append every entry of a store log to a store.
    Import(ImportArgs),
    /// Write a store's canonical log.
    Export(ExportArgs),
    /// Fetch caption embeddings for a store from an embedding service.
    Embed(EmbedArgs),
    /// Expand rankings into comparison pairs, split by image.
    Pairgen(PairgenArgs),
    /// Train a reward head on comparison pairs.
    Train(TrainArgs),
    /// Score corpus shards with a trained head.
    Score(ScoreArgs),
    /// Select the top fraction of a score table.
    Compress(CompressArgs),
    /// Filter a corpus listing down to a manifest's pairs.
    Apply(ApplyArgs),
    /// Best-caption and pairwise accuracy against stored rankings.
    EvalPreference(EvalArgs),
    /// Summary statistics of a score table.
    Stats(StatsArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Write a synthetic store, embeddings and corpus.
    Demo(DemoArgs),
}

#[derive(Args, Debug)]
pub struct InitStoreArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub store_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Store log to read.
    #[arg(long)]
    pub from: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Shard to write, keyed by (image, caption).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub expected_dimension: Option<usize>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PairgenArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Training pairs.
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out pairs; required when the holdout fraction is positive.
    #[arg(long)]
    pub holdout_out: Option<PathBuf>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
    #[arg(long)]
    pub max_pairs_per_image: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Caption embeddings (shards or JSON lines).
    #[arg(long, num_args = 1.., required = true)]
    pub embeddings: Vec<PathBuf>,
    #[arg(long)]
    pub holdout_pairs: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint; its architecture and settings win
    /// except for the update budget.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub total_updates: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dropout_enabled: Option<bool>,
    #[arg(long)]
    pub shared_dropout_mask: Option<bool>,
    #[arg(long)]
    pub per_image_weighting: Option<bool>,
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Input width first, e.g. `768,1024,128,64,16`.
    #[arg(long)]
    pub layer_widths: Option<List<usize>>,
    #[arg(long)]
    pub dropout_rates: Option<List<f64>>,
    /// relu, gelu or tanh.
    #[arg(long)]
    pub activation: Option<String>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub shards: Vec<PathBuf>,
    /// Binary score table.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `id<TAB>score` text.
    #[arg(long)]
    pub text_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// `a/b`, a decimal, or a percentage such as `50%`.
    #[arg(long)]
    pub keep_ratio: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Estimate the threshold from a sample of this many scores instead of
    /// an exact selection.
    #[arg(long)]
    pub approximate_sample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ApplyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Corpus listing whose first tab-separated field is the pair id.
    #[arg(long)]
    pub listing: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("scorer").required(true).args(["checkpoint", "image_embeddings"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Reward head to evaluate; needs `--embeddings`.
    #[arg(long, requires = "embeddings")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub embeddings: Vec<PathBuf>,
    /// Cosine baseline image side; needs `--text-embeddings`.
    #[arg(long, num_args = 1.., requires = "text_embeddings")]
    pub image_embeddings: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub text_embeddings: Vec<PathBuf>,
    /// Canonical text report.
    #[arg(long)]
    pub out: PathBuf,
    /// Machine-readable JSON summary.
    #[arg(long)]
    pub summary_out: Option<PathBuf>,
    #[arg(long)]
    pub strict_best: Option<bool>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Text summary.
    #[arg(long)]
    pub out: PathBuf,
    /// Quantile levels, e.g. `0.1,0.5,0.9`.
    #[arg(long)]
    pub levels: Option<List<f64>>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub lease_ttl_secs: Option<u64>,
    #[arg(long)]
    pub replication: Option<usize>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub labelers: Option<List<String>>,
    /// Static frontend directory served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub captions_per_image: Option<usize>,
    #[arg(long)]
    pub dimension: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Extra caption spread along the hidden scoring direction.
    #[arg(long)]
    pub quality_spread: Option<f64>,
    #[arg(long)]
    pub corpus_pairs: Option<usize>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub random_labels: Option<bool>,
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_env("SIFT_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::InitStore(a) => commands::init_store(cfg, a),
        Command::Import(a) => commands::import(cfg, a),
        Command::Export(a) => commands::export(cfg, a),
        Command::Embed(a) => commands::embed(cfg, a),
        Command::Pairgen(a) => commands::pairgen(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Score(a) => commands::score(cfg, a),
        Command::Compress(a) => commands::compress(cfg, a),
        Command::Apply(a) => commands::apply(cfg, a),
        Command::EvalPreference(a) => commands::eval_preference(cfg, a),
        Command::Stats(a) => commands::stats(cfg, a),
        Command::Serve(a) => commands::serve(cfg, a),
        Command::Demo(a) => commands::demo(cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("sift: {}", CliError::Usage(first.to_string()).line());
            return ExitCode::from(2);
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sift: {}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
