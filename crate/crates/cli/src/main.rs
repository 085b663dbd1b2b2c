//! `nucleiquant`: evaluation, counting, gradient checks, toy training and
//! inference for nuclei instance segmentation.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 parse error (bad flags or an
//! unreadable NPY / weight file), 3 validation failure, 4 shape mismatch,
//! 5 gradient check failure, 6 non-finite loss, 7 weight/config mismatch.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "nucleiquant", version, about = "Nuclei instance segmentation evaluation and toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score predicted labels against ground truth (PQ, mPQ, R²).
    Evaluate(EvaluateArgs),
    /// Per-patch instance counts per class, as CSV.
    Count(CountArgs),
    /// Finite-difference check of every kernel and a tiny network.
    Gradcheck(GradcheckArgs),
    /// Train a small network on a lizard-format dataset.
    TrainToy(TrainArgs),
    /// Run saved weights on images and write predicted labels.
    Forward(ForwardArgs),
    /// Print the header and per-channel ranges of an NPY file.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ground-truth labels, u16 [N, H, W, 2].
    #[arg(long)]
    pub gt: PathBuf,
    /// Predicted labels, same layout.
    #[arg(long)]
    pub pred: PathBuf,
    /// Number of foreground classes.
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    /// Average PQ over images instead of pooling matches over the dataset.
    #[arg(long)]
    pub per_image: bool,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report format; defaults to the --out extension, else json.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Relative tolerance for the kernels; the network uses 10x this.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Print the full reports as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Layout {
    Stacked,
    Interleaved,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// sgd or ranger.
    #[arg(long, default_value = "ranger")]
    pub optimizer: String,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Seeds weight initialisation and batch order.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Where to write the trained weights.
    #[arg(long)]
    pub save: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    /// GroupNorm group count.
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long, value_enum, default_value_t = Layout::Stacked)]
    pub layout: Layout,
    /// Disable encoder-decoder skip connections.
    #[arg(long)]
    pub no_skip: bool,
    /// Multiply the learning rate by --decay-factor every this many steps.
    #[arg(long)]
    pub decay_every: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    pub decay_factor: f64,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Output labels, u16 [N, H, W, 2].
    #[arg(long)]
    pub out: PathBuf,
    /// Components smaller than this many pixels are dropped.
    #[arg(long, default_value_t = 3)]
    pub min_size: usize,
    /// Patches per forward pass.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub file: PathBuf,
}

fn configure_threads() {
    if let Some(n) = std::env::var("NUCLEIQUANT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // Ignored if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Count(a) => commands::count(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::TrainToy(a) => commands::train_toy(&a),
        Command::Forward(a) => commands::forward(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
