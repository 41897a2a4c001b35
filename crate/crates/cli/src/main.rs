//! `mh3d`: synthesize datasets, train, render, evaluate and ablate.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric abort during training.
//! `MH3D_THREADS` sets the worker count (default 1, which keeps every
//! output bitwise reproducible).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mh3d_core::synthdata::SceneKind;
use mh3d_core::trainer::Profile;

mod commands;
mod error;
mod manifest;

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "mh3d", version, about = "Single-exposure HDR novel view synthesis on a voxel radiance field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset (LDR views, HDR ground truth, manifest).
    Synth(SynthArgs),
    /// Train the field and both converters on a dataset.
    Train(TrainArgs),
    /// Render views from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint or a directory of rendered views.
    Eval(EvalArgs),
    /// Run the loss-subset and converter-swap grid.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// checker-sphere, emissive-boxes or gradient-room.
    #[arg(long, default_value_t = SceneKind::EmissiveBoxes, value_parser = parse_scene)]
    pub scene: SceneKind,
    /// Index into the exposure ladder 0.125, 0.25, 0.5, 1, 2 (seconds).
    #[arg(long, default_value_t = 3)]
    pub exposure_index: usize,
    /// Seeds the scene layout and the sensor noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of the additive sensor noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    /// Sensor offset current.
    #[arg(long, default_value_t = 0.0)]
    pub i0: f64,
    /// Number of ring poses; even indices train, odd indices test.
    #[arg(long, default_value_t = 35)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    #[arg(long, default_value_t = 64)]
    pub height: u32,
    #[arg(long, default_value_t = 72.0)]
    pub focal: f64,
    /// Ground-truth voxel grid resolution per axis.
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// Minimum ratio of brightest to darkest surface radiance.
    #[arg(long, default_value_t = 100.0)]
    pub span: f64,
    /// Samples per ray when rendering the ground truth.
    #[arg(long, default_value_t = 64)]
    pub n_samples: usize,
    /// Output dataset directory.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides beta and the LDR loss mode [default: from the config, splat-style if none].
    #[arg(long, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    /// Overrides the iteration budget [default: from the config].
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Overrides the training seed [default: from the config].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint; its embedded config is used.
    #[arg(long, conflicts_with_all = ["config", "profile", "seed"])]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps and checkpoint (0 runs the full budget).
    #[arg(long, default_value_t = 0)]
    pub stop_after: u64,
    /// Log the training loss every this many steps.
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RenderMode {
    Ldr,
    Hdr,
    HdrTonemapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose poses are rendered; ground truth enables PSNR reports.
    #[arg(long, required_unless_present = "poses")]
    pub data: Option<PathBuf>,
    /// JSON array of pose records (`index`, `matrix`, `intrinsics`).
    #[arg(long, conflicts_with = "data")]
    pub poses: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Comma-separated view indices; overrides --split.
    #[arg(long, value_delimiter = ',')]
    pub views: Vec<usize>,
    #[arg(long, value_enum, default_value_t = RenderMode::Ldr)]
    pub mode: RenderMode,
    /// Tonemap compression for hdr-tonemapped output.
    #[arg(long, default_value_t = 5000.0)]
    pub mu: f64,
    /// Samples per ray [default: from the checkpoint config].
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "pred_dir", conflicts_with = "pred_dir")]
    pub checkpoint: Option<PathBuf>,
    /// Directory with `ldr/view_NNN.ppm` and optionally `hdr/view_NNN.pfm`
    /// (or `hdr_gt/`) predictions.
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, default_value_t = 5000.0)]
    pub mu: f64,
    /// Pixel stride of the cross-view consistency probe.
    #[arg(long, default_value_t = 4)]
    pub consistency_stride: u32,
    /// Depth tolerance for a surface point to count as visible in both views.
    #[arg(long, default_value_t = 0.05)]
    pub consistency_tolerance: f64,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Base JSON training config for every cell [default: built-in defaults].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides beta and the LDR loss mode [default: from the config].
    #[arg(long, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    /// Overrides the per-run iteration budget [default: from the config].
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Comma-separated cell names to run [default: all nine].
    #[arg(long, value_delimiter = ',')]
    pub cells: Vec<String>,
    /// Report directory; each run gets `cells/<cell>/seed_<n>/`.
    #[arg(short, long)]
    pub out: PathBuf,
}

fn parse_scene(s: &str) -> Result<SceneKind, String> {
    s.parse().map_err(|e: mh3d_core::synthdata::SynthError| e.to_string())
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse()
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("MH3D_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::usage(format!("MH3D_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads()?)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Render(a) => commands::render(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mh3d: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
