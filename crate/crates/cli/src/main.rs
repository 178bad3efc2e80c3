use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

use manifest::Precision;

#[derive(Parser)]
#[command(name = "gdcunet", version, about = "Vessel segmentation with deformable-offset U-Nets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint, an epoch log and a run manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write per-image metrics.
    Eval(EvalArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Export per-channel feature maps and histograms at a named tap.
    Inspect(InspectArgs),
    /// Print layer-wise and total parameter counts.
    Params(ParamsArgs),
    /// Write synthetic vessel pairs as images/ and masks/.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InitArg {
    He,
    FanIn,
}

impl From<InitArg> for gdcunet::ConvInit {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::He => gdcunet::ConvInit::He,
            InitArg::FanIn => gdcunet::ConvInit::FanIn,
        }
    }
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Dataset root containing images/ and masks/.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Use generated vessel images instead of a dataset directory.
    #[arg(long)]
    pub synthetic: bool,
    /// Suffix stripped from mask file stems before pairing, e.g. _1stHO.
    #[arg(long)]
    pub mask_suffix: Option<String>,
    /// Square side length images are resized to (default 256, synthetic 128).
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Repeat a previous run exactly; other configuration flags are ignored.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory (default: runs/, or the manifest's own directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// SAFDConv preset 1-6.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=6))]
    pub setting: u8,
    /// Initial learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Minimum learning rate at the last epoch.
    #[arg(long, default_value_t = 1e-5)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.99)]
    pub beta2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Replace SAFDConvs by conventional convolutions of the same size.
    #[arg(long)]
    pub ablation: bool,
    /// GELU inside the offset-network feedforward.
    #[arg(long)]
    pub ff_gelu: bool,
    /// Convolution weight bound: he = sqrt(6/fan_in), fan-in = sqrt(1/fan_in).
    #[arg(long, value_enum, default_value_t = InitArg::He)]
    pub conv_init: InitArg,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Random horizontal flips of training pairs.
    #[arg(long)]
    pub flip: bool,
    /// Synthetic training pairs.
    #[arg(long, default_value_t = 50)]
    pub train_count: usize,
    /// Synthetic test pairs.
    #[arg(long, default_value_t = 10)]
    pub test_count: usize,
    /// Training fraction for directory datasets.
    #[arg(long, default_value_t = 0.86)]
    pub split_ratio: f64,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Synthetic pairs to score.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// First synthetic seed.
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Metrics CSV path.
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Directory receiving one predicted mask PNG per input.
    #[arg(long)]
    pub export_masks: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Suites to run: tensor, warp, offset, safdconv, loss or all.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub scope: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_sign_flip: Option<String>,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required_unless_present = "list_taps")]
    pub image: Option<PathBuf>,
    #[arg(long, required_unless_present = "list_taps")]
    pub tap: Option<String>,
    #[arg(long, default_value = "inspect")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
    /// Print valid tap names and exit.
    #[arg(long)]
    pub list_taps: bool,
}

#[derive(Args)]
pub struct ParamsArgs {
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=6))]
    pub setting: u8,
    #[arg(long)]
    pub ablation: bool,
    #[arg(long)]
    pub ff_gelu: bool,
    /// Also print the totals of every preset.
    #[arg(long)]
    pub all: bool,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Params(a) => commands::params(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<gdcunet::Error>().is_some_and(|g| matches!(g, gdcunet::Error::Usage(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
