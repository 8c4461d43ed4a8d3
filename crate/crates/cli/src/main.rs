//! `armo`: ingest, fit, calibrate, train-gating, score, eval and synth.
//!
//! Every command writes its artifact and prints a one-line JSON summary to
//! stdout. Exit codes: 0 success, 2 validation error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "armo", version, about = "Multi-objective reward model pipeline on precomputed features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize and merge raw ratings (or pairs) into a feature store.
    Ingest(IngestArgs),
    /// Fit the per-objective linear head on a rated store.
    Fit(FitArgs),
    /// Calibrate verbosity penalties on a reference rated store.
    Calibrate(CalibrateArgs),
    /// Train the gating network and write a model bundle.
    TrainGating(TrainArgs),
    /// Score (prompt, response) features with a bundle.
    Score(ScoreArgs),
    /// Weighted category evaluation from a manifest.
    Eval(EvalArgs),
    /// Generate planted synthetic stores.
    Synth(SynthArgs),
}

#[derive(clap::Args)]
pub struct IngestArgs {
    /// JSON-lines dataset manifest: {"dataset", "objectives", "scales"}.
    #[arg(long, required_unless_present = "pairs", requires = "ratings")]
    pub manifest: Option<PathBuf>,
    /// JSON-lines raw ratings: {"dataset", "feature", "ratings"}.
    #[arg(long, requires = "manifest")]
    pub ratings: Option<PathBuf>,
    /// JSON-lines pairs {"prompt", "chosen", "rejected"}; writes a pair store.
    #[arg(long, conflicts_with_all = ["manifest", "ratings"])]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct FitArgs {
    /// Rated feature store.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ridge strength [default: 1e-6].
    #[arg(long)]
    pub ridge: Option<f64>,
    /// JSON config with key "ridge".
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub head: PathBuf,
    /// Rated store whose features form the reference set.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// spearman or pearson [default: spearman].
    #[arg(long)]
    pub metric: Option<String>,
    /// Name of the verbosity objective [default: verbosity].
    #[arg(long)]
    pub verbosity: Option<String>,
    /// Target |correlation| [default: 1e-3].
    #[arg(long)]
    pub tol: Option<f64>,
    /// JSON config with keys "metric", "verbosity", "tol".
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    /// Pair store.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Output model bundle.
    #[arg(long)]
    pub out: PathBuf,
    /// Learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Optimizer steps [default: 10000].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Batch size [default: 1024].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Initial beta [default: 100].
    #[arg(long)]
    pub beta_init: Option<f64>,
    /// Hidden widths, comma separated [default: 1024,1024,1024].
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// AdamW weight decay [default: 0.01].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Seed for gate init, shuffling and the holdout split [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of pairs held out for the reported accuracy [default: 0].
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Write the loss history CSV here.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// JSON config with keys "lr", "steps", "batch", "beta_init", "hidden",
    /// "weight_decay", "seed", "holdout".
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// JSON-lines {"prompt": [..], "response": [..]}.
    #[arg(long)]
    pub input: PathBuf,
    /// Fixed weights "name=w[,name=w..]", renormalized; bypasses the gate.
    #[arg(long)]
    pub steer: Option<String>,
    /// Write one decomposition report per input line here (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    /// JSON manifest {"categories": [{"name", "weight", "pairs_path" or "accuracy"}]}.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Needed when any category has a pairs_path.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, requires = "bundle")]
    pub steer: Option<String>,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model name for the plain-text table printed to stderr.
    #[arg(long, default_value = "model")]
    pub name: String,
}

#[derive(clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 20000]
    #[arg(long)]
    pub n_pairs: Option<usize>,
    /// Rated records [default: n_pairs].
    #[arg(long)]
    pub n_rated: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    pub d: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    pub k: Option<usize>,
    /// Rating noise standard deviation [default: 0.05].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Share of pairs written to the test store [default: 0.2].
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// JSON config with keys "seed", "n_pairs", "n_rated", "d", "k", "noise", "test_fraction".
    #[arg(long)]
    pub config: Option<PathBuf>,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<armo_core::Error>())
        .any(armo_core::Error::is_numerical);
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("ARMO_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| armo_core::Error::InvalidArgument(format!("ARMO_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Ingest(a) => commands::ingest(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::TrainGating(a) => commands::train(&a),
        Command::Score(a) => commands::score(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Synth(a) => commands::synth(&a),
    });
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
