mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emotalk_core::rig::BlendMode;

#[derive(Parser, Debug)]
#[command(name = "emotalk", version, about = "Emotional speech-to-blendshape pipeline")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (WAV + CSV per clip, manifest, rig).
    GenData(GenDataArgs),
    /// Train on a dataset, then evaluate on its held-out split.
    Train(TrainArgs),
    /// Predict blendshapes for one WAV file.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Blend a coefficient CSV into an OBJ sequence.
    Convert(ConvertArgs),
    /// Write SVG plots of a coefficient CSV or a metrics log.
    Plot(PlotArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RigArgs {
    /// Rig directory (neutral.obj, templates/, masks/).
    #[arg(long)]
    rig: Option<PathBuf>,
    #[arg(long)]
    lip_mask: Option<PathBuf>,
    #[arg(long)]
    eye_forehead_mask: Option<PathBuf>,
    /// literal or delta.
    #[arg(long)]
    mode: Option<BlendMode>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    contents: Option<usize>,
    #[arg(long)]
    emotions: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    clips_per_cell: Option<usize>,
    #[arg(long)]
    heldout_per_cell: Option<usize>,
    #[arg(long)]
    duration: Option<f64>,
    /// Savitzky-Golay (5, 2) smoothing of the targets.
    #[arg(long)]
    smooth: bool,
    /// Vertex count of the synthetic rig written alongside.
    #[arg(long)]
    rig_vertices: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from `<out>/checkpoint.bin`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Stop at this step, leaving a resumable checkpoint.
    #[arg(long)]
    stop_at: Option<u64>,
    #[command(flatten)]
    rig: RigArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    #[arg(long, default_value_t = 0)]
    level: usize,
    #[arg(long, default_value_t = 0)]
    style: usize,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Clamp exported coefficients to [0, 1].
    #[arg(long)]
    clamp: bool,
    /// Also write one OBJ per frame here (needs a rig).
    #[arg(long)]
    obj_dir: Option<PathBuf>,
    #[command(flatten)]
    rig: RigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    rig: RigArgs,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    /// OBJ output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Smooth the coefficients before converting.
    #[arg(long)]
    smooth: bool,
    /// Write the (possibly smoothed) coefficients as CSV.
    #[arg(long)]
    csv_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    rig: RigArgs,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Blendshape CSV or metrics.jsonl.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Channel indices to plot (CSV input); all by default.
    #[arg(long, value_delimiter = ',')]
    channels: Vec<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::RunConfig::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::GenData(a) => commands::gen_data(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Infer(a) => commands::infer(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Convert(a) => commands::convert(cfg, a),
        Command::Plot(a) => plot::plot(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
