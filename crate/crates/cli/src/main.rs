//! `mocorr`: batch driver for phantom generation, motion simulation, the
//! severity study, training, evaluation, ablations and gradient checks.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
//! failure, 3 I/O or file-format error.

mod commands;
mod manifest;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mocorr_core::motion::Severity;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "mocorr", version, about = "Rigid-motion artifact simulation and correction")]
struct Cli {
    /// Force sequential, reproducible execution. Recorded in the manifest.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Write synthetic head phantoms as .mvol files.
    Phantom(PhantomArgs),
    /// Corrupt a volume with simulated rigid motion.
    Simulate(SimulateArgs),
    /// Corrupt phantoms at every severity and correlate the metrics.
    SeverityStudy(SeverityStudyArgs),
    /// Train the correction network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its held-out subjects.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the ablation rows on one shared split.
    Ablate(AblateArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Re-run the invocation recorded in a manifest.
    Replay(ReplayArgs),
}

fn default_out() -> PathBuf {
    PathBuf::from("mocorr-out")
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, env = "MOCORR_OUT", default_value = "mocorr-out")]
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|p: Vec<usize>| format!("expected 3 dimensions, got {}", p.len()))
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// nx,ny,nz
    #[arg(long, value_parser = parse_dims, default_value = "64,64,32")]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Interior structures per phantom.
    #[arg(long, default_value_t = 6)]
    pub n_structures: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    /// Independent per-slice corruption, one state per ky line.
    #[value(name = "2d")]
    #[serde(rename = "2d")]
    TwoD,
    /// Whole-volume corruption, one state per (ky, kz) point.
    #[value(name = "3d")]
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Clean input volume (.mvol).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "moderate")]
    pub preset: Severity,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the trajectories; defaults to the output directory.
    #[arg(long)]
    pub traj_out: Option<PathBuf>,
    /// Replay recorded trajectories instead of drawing new ones.
    #[arg(long)]
    pub traj_in: Option<PathBuf>,
    /// Translate only along phase-encoded axes.
    #[arg(long)]
    pub pe_only: bool,
    #[arg(long, value_enum, default_value = "2d")]
    pub mode: SimMode,
    /// Intensity range L used for PSNR and the SSIM constants.
    #[arg(long, default_value_t = 1.0)]
    pub dynamic_range: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SeverityStudyArgs {
    /// Directory of clean .mvol volumes.
    #[arg(long)]
    pub phantoms: PathBuf,
    #[arg(long, alias = "seeds", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub pe_only: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size network and schedule.
    Paper,
    /// Small network, batch 4, 15 epochs.
    Toy,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// JSON file merged over the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paper")]
    pub profile: Profile,
    /// key.path=value override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory of clean .mvol volumes, one per subject.
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// The directory the checkpoint was trained from.
    #[arg(long)]
    pub data: PathBuf,
    /// Write per-subject difference volumes.
    #[arg(long)]
    pub diff_maps: bool,
    /// Absolute instead of signed (pred - clean) differences.
    #[arg(long)]
    pub absolute: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    /// JSON ablation spec merged over the defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    /// Comma-separated check names, or "all".
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub ops: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the re-run; defaults to the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli.command, cli.deterministic) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
