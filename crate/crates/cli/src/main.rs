use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Train and evaluate whole-image regression networks.
#[derive(Parser, Debug)]
#[command(name = "halfcnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Run a checkpoint on one image and write its output map.
    Predict(PredictArgs),
    /// Window retrieval rate against annotated windows (CSV).
    EvalDetection(EvalDetectionArgs),
    /// AUC and shuffled AUC per image (CSV).
    EvalSaliency(EvalSaliencyArgs),
    /// Write the downsampled target map of every manifest record.
    MakeGt(MakeGtArgs),
    /// Generate a synthetic blob detection data set.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients of a network spec.
    Gradcheck(GradcheckArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Optimizer {
    Lbfgs,
    Sgd,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    spec_file: PathBuf,
    /// Square canvas side every image is padded to.
    #[arg(long, default_value_t = 256)]
    canvas: usize,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, value_enum, default_value_t = Optimizer::Lbfgs)]
    optimizer: Optimizer,
    /// L2 penalty weight.
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// L-BFGS iteration budget.
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Write the L-BFGS trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// `.pgm` writes an 8-bit preview, anything else the raw f64 map.
    #[arg(long)]
    out_map: PathBuf,
}

#[derive(Args, Debug)]
struct EvalDetectionArgs {
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    /// Score the ground-truth target maps instead of network output.
    #[arg(long, conflicts_with = "ckpt")]
    oracle: bool,
    /// Map factor for --oracle; taken from the checkpoint otherwise.
    #[arg(long, default_value_t = 4)]
    factor: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalSaliencyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Share of cells taken as fixations when a record has a map or windows.
    #[arg(long, default_value_t = 0.05)]
    top_frac: f64,
    #[arg(long, default_value_t = 100)]
    sauc_rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MakeGtArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 256)]
    canvas: usize,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    /// Defaults to the manifest's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    canvas: usize,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, default_value_t = 1)]
    min_windows: usize,
    #[arg(long, default_value_t = 2)]
    max_windows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    spec_file: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// First seed; `--seeds` consecutive seeds are checked.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Square input side; defaults to the smallest valid size of at least 8.
    #[arg(long)]
    size: Option<usize>,
    /// Also check every layer in isolation.
    #[arg(long)]
    layers: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::EvalDetection(a) => commands::eval_detection(a),
        Command::EvalSaliency(a) => commands::eval_saliency(a),
        Command::MakeGt(a) => commands::make_gt(a),
        Command::Synth(a) => commands::synth(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<halfcnn::Error>() {
                Some(halfcnn::Error::Usage(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
