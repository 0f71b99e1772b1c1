//! `repflow`: flow export, gradient checks, benchmarks and toy training.
//!
//! Exit codes: 0 success, 2 usage or invalid setting, 3 unreadable or
//! malformed input, 4 dimension mismatch, 5 write failure, 6 numerical
//! failure, 7 gradient check failed.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use repflow::bench::Width;

#[derive(Parser, Debug)]
#[command(
    name = "repflow",
    version,
    about = "Representation flow: TV-L1 flow as a learnable layer"
)]
pub struct Cli {
    /// Worker threads for per-channel parallelism; 1 gives reproducible timing.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML file of defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute flow between two PGM/PPM images and write a .flo file.
    Flow(FlowArgs),
    /// Compare reverse-mode gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Time the flow iteration and write a CSV of throughput.
    Bench(BenchArgs),
    /// Train the toy motion classifier.
    Train(TrainArgs),
    /// Train one model per setting along an ablation axis.
    Ablate(AblateArgs),
    /// List the tensors of an RFW1 checkpoint or dataset cache.
    InspectCheckpoint(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WidthArg {
    F32,
    F64,
}

impl From<WidthArg> for Width {
    fn from(w: WidthArg) -> Width {
        match w {
            WidthArg::F32 => Width::F32,
            WidthArg::F64 => Width::F64,
        }
    }
}

#[derive(Args, Debug)]
pub struct FlowArgs {
    pub image1: PathBuf,
    pub image2: PathBuf,
    /// Output .flo path; with --per-channel, `_c<k>` is inserted before the extension.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Also write a colour-wheel rendering as binary PPM.
    #[arg(long)]
    pub viz: Option<PathBuf>,
    /// Iterations [default: 100, or the checkpoint's count].
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    /// Real width of the computation [default: f32].
    #[arg(long, value_enum)]
    pub width: Option<WidthArg>,
    /// Flow per colour channel instead of on Rec. 601 luma.
    #[arg(long)]
    pub per_channel: bool,
    /// Use learned flow parameters from an RFW1 checkpoint instead of the
    /// reference solver.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Tensor-name prefix of the flow parameters [default: auto-detect].
    #[arg(long)]
    pub prefix: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Side of the square fixtures.
    #[arg(long)]
    pub size: Option<usize>,
    /// Finite-difference step.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Leaf groups to check: scalars, divergence, sobel, inputs, layer, fcf, all.
    #[arg(long, value_delimiter = ',')]
    pub learn: Option<Vec<String>>,
    /// Also write the per-leaf report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    pub iterations: Option<Vec<usize>>,
    /// Square image sides.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Timed runs per row (at least 10).
    #[arg(long)]
    pub runs: Option<usize>,
    /// Untimed runs before timing.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, value_enum)]
    pub width: Option<WidthArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination [default: stdout].
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Flow,
    Fcf,
    Appearance,
}

/// Overrides applied on top of the `[experiment]` config section.
#[derive(Args, Debug, Default)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Flow iterations per layer.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub c_prime: Option<usize>,
    #[arg(long)]
    pub features: Option<usize>,
    /// Learn preset: none, sobel, divergence, scalars, all, divergence+scalars.
    #[arg(long)]
    pub learn: Option<String>,
    /// Training and test videos per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Frames per video.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Frame side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Reuse (or create) an RFW1 cache of the generated dataset.
    #[arg(long)]
    pub dataset_cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Directory for init.rfw, model.rfw, history.csv and config.toml.
    #[arg(short, long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// learn, iterations or fcf.
    #[arg(long)]
    pub axis: Option<String>,
    /// Settings along the axis, e.g. `none,all` or `1,5,10`.
    #[arg(long, value_delimiter = ',')]
    pub settings: Option<Vec<String>>,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Directory for ablation.csv.
    #[arg(short, long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
