mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use osmsl::trainer::HeadKind;

#[derive(Parser, Debug)]
#[command(name = "osmsl", version, about = "Joint video scene segmentation and classification by sequential link tagging")]
struct Cli {
    /// Worker threads for prediction (falls back to OSMSL_THREADS, then 1).
    #[arg(long, global = true, env = "OSMSL_THREADS")]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus split into train/val/test.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus loss curves.
    Train(TrainArgs),
    /// Predict scenes for every video in a features file.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Dump per-shot emissions, marginals and decoded tags for one video.
    Inspect(InspectArgs),
    /// Render normalized loss curves to SVG and CSV.
    Curves(CurvesArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings (TOML or JSON); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_videos: Option<usize>,
    #[arg(long)]
    pub num_categories: Option<usize>,
    #[arg(long)]
    pub sigma_scene: Option<f64>,
    #[arg(long)]
    pub sigma_shot: Option<f64>,
    #[arg(long)]
    pub center_scale: Option<f64>,
    /// Rotate within-class drift to mimic unseen programs.
    #[arg(long)]
    pub generalized: bool,
}

#[derive(Args, Debug)]
pub struct SchemeArgs {
    /// Label scheme file (scheme.json).
    #[arg(long, conflicts_with_all = ["categories", "ss"])]
    pub scheme: Option<PathBuf>,
    /// Comma-separated category names (segmentation + classification).
    #[arg(long, value_delimiter = ',', conflicts_with = "ss")]
    pub categories: Option<Vec<String>>,
    /// Segmentation only; categories in scene files are ignored.
    #[arg(long)]
    pub ss: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Shot features (JSONL).
    #[arg(long)]
    pub features: PathBuf,
    /// Gold scenes (JSON).
    #[arg(long)]
    pub scenes: PathBuf,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// Output directory for model.ckpt, curves.csv and train_config.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Framework to train.
    #[arg(long)]
    pub head: Option<HeadKind>,
    /// Settings file (TOML or JSON) with optional `head`, `[train]` and `[model]`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Output predictions file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted scenes (JSON).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth scenes (JSON).
    #[arg(long)]
    pub gt: PathBuf,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// Take the label scheme from a checkpoint instead.
    #[arg(long, conflicts_with_all = ["scheme", "categories", "ss"])]
    pub checkpoint: Option<PathBuf>,
    /// Pin the categories averaged by macro scores.
    #[arg(long, value_delimiter = ',')]
    pub macro_categories: Option<Vec<String>>,
    /// Output report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Video to inspect.
    #[arg(long)]
    pub video: String,
    /// Output file (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CurvesArgs {
    /// Curve files as `LABEL=PATH` or `PATH`; repeatable.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Moving-average window applied to plotted series.
    #[arg(long, default_value_t = 1)]
    pub smooth: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let threads = cli.threads.unwrap_or(1).max(1);
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a, threads),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Curves(a) => commands::curves(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
