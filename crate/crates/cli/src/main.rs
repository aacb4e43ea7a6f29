//! `czsl`: data generation, training, evaluation, ablations, sweeps and
//! weight plots. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "czsl",
    version,
    about = "Compositional zero-shot recognition with multi-level feature aggregation"
)]
pub struct Cli {
    /// Root under which each run gets a timestamped directory.
    #[arg(long, global = true, env = "CZSL_OUTPUT_ROOT", default_value = "runs")]
    pub output_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic attribute-object dataset.
    GenData(GenDataArgs),
    /// Train a model and evaluate its best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalArgs),
    /// Train and evaluate a grid of ablation cells.
    Ablate(AblateArgs),
    /// Train and evaluate one model per value of alpha or tau.
    Sweep(SweepArgs),
    /// Scatter per-branch low- vs high-level aggregation weights.
    PlotWeights(PlotWeightsArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Dataset directory (default: `data` inside the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub attrs: usize,
    #[arg(long, default_value_t = 5)]
    pub objs: usize,
    /// Fraction of compositions seen in training.
    #[arg(long, default_value_t = 0.8)]
    pub seen_fraction: f64,
    /// Training images per seen pair.
    #[arg(long, default_value_t = 100)]
    pub images_per_pair: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Model and optimization settings shared by train, ablate and sweep.
/// Precedence: defaults, then `--config`, then named flags, then `--set`.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Dataset directory or its manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// File of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set predictor_channels=8,16,32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, value_parser = ["learned", "standard", "mean", "random", "random-simplex"])]
    pub agg_strategy: Option<String>,
    #[arg(long, value_parser = ["attention", "gap"])]
    pub pooling: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    pub focus_loss: Option<String>,
    /// First-order focus loss: maps are treated as constants.
    #[arg(long)]
    pub detach_maps: bool,
    /// Keep primitive node embeddings at their initial word vectors.
    #[arg(long)]
    pub freeze_node_init: bool,
    #[arg(long, value_parser = ["sum", "softmax"])]
    pub fuse: Option<String>,
    /// Dense grid of K biases instead of the exact threshold sweep.
    #[arg(long, value_name = "K")]
    pub grid: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Active backbone levels, e.g. `1,2,3`.
    #[arg(long)]
    pub levels: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or its manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    /// Dense grid of K biases instead of the exact threshold sweep.
    #[arg(long, value_name = "K")]
    pub grid: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated strategies.
    #[arg(long, default_value = "learned")]
    pub strategies: String,
    /// Comma-separated poolings.
    #[arg(long, default_value = "attention")]
    pub poolings: String,
    /// Comma-separated focus settings (on, off).
    #[arg(long, default_value = "on")]
    pub focus_modes: String,
    /// Level subsets separated by `;`, e.g. `3;2,3;1,2,3`.
    #[arg(long, default_value = "1,2,3")]
    pub level_sets: String,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_parser = ["alpha", "tau"])]
    pub param: String,
    /// Comma-separated values.
    #[arg(long)]
    pub values: String,
}

#[derive(Args, Debug)]
pub struct PlotWeightsArgs {
    /// weights.csv written by train or eval.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    pub log: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    match commands::dispatch(&cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
