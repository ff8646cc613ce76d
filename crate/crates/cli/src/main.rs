//! `lldm`: dataset generation, staged training, synthesis, evaluation and
//! the augmentation experiment, all under one output root:
//!
//! ```text
//! <out>/data/         phantom dataset + manifest
//! <out>/checkpoints/  one directory per training stage
//! <out>/synth/        synthetic pairs + manifest (+ montages)
//! <out>/reports/      metric JSON and text tables
//! ```
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "lldm", version, about = "Label-guided 3D latent diffusion runs")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom dataset into <out>/data.
    GenData(GenDataArgs),
    /// Train one stage, or all stages with resume.
    Train(TrainArgs),
    /// Sample synthetic (label, volume) pairs into <out>/synth.
    Synthesize(SynthArgs),
    /// Compute FID or Dice between two manifests.
    Eval(EvalArgs),
    /// Real vs. real+synthetic segmentation comparison.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of phantoms.
    #[arg(long)]
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    VaeVol,
    VaeLabel,
    LdmLabel,
    Controlnet,
    All,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Dataset manifest (default: <out>/data, generated if absent).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of pairs.
    #[arg(long)]
    pub n: usize,
    /// Also write axial/sagittal/coronal montage PNGs.
    #[arg(long)]
    pub montage: bool,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("metric").required(true).args(["fid", "per_view", "dice"]))]
pub struct EvalArgs {
    /// Whole-volume FID.
    #[arg(long)]
    pub fid: bool,
    /// Axial, sagittal and coronal slice FID plus their average.
    #[arg(long)]
    pub per_view: bool,
    /// Per-class Dice of the first manifest's labels against the second's (matched by id).
    #[arg(long)]
    pub dice: bool,
    /// First manifest (generated / predicted).
    pub a: PathBuf,
    /// Second manifest (reference).
    pub b: PathBuf,
    /// Row label in the text table.
    #[arg(long, default_value = "LDM")]
    pub method: String,
    /// Report name under <out>/reports.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Comma-separated tasks.
    #[arg(long, value_delimiter = ',', default_value = "liver_only,vein_only,hcc_only,multi_class")]
    pub tasks: Vec<String>,
    /// Comma-separated architectures (unet, resunet).
    #[arg(long, value_delimiter = ',', default_value = "unet")]
    pub arch: Vec<String>,
    /// Number of seeds per cell.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Real manifest (default: <out>/data).
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Synthetic manifest (default: <out>/synth).
    #[arg(long)]
    pub synth: Option<PathBuf>,
    /// Override the step cap per training run.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<commands::UsageError>() {
                eprintln!("error: {u}");
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
