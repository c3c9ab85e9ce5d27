//! `scarq`: phantom generation, distance maps, losses, training, projection and evaluation.

mod commands;
mod parallel;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scarq_core::distance::DpmVariant;
use scarq_core::losses::{M2Mode, ScarMetric};
use scarq_core::model::{Arm, ModelKind};
use scarq_core::volume::Axis;

#[derive(Debug, Parser)]
#[command(
    name = "scarq",
    version,
    about = "Joint LA segmentation and scar quantification on volumetric phantoms"
)]
pub struct Cli {
    /// Seed for every random draw of this invocation
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Worker threads for independent cases or sweep points
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a train/test suite of synthetic atrial phantoms
    GenPhantom(GenPhantomArgs),
    /// Signed distance map of a binary label
    Dtm(DtmArgs),
    /// Normal-wall and scar distance probability maps of a wall/scar label
    Dpm(DpmArgs),
    /// Evaluate the joint objective on stored predictions
    LossEval(LossEvalArgs),
    /// Train a toy model on a phantom suite
    Train(TrainArgs),
    /// Project a wall/scar label onto the boundary of an LA label and export it as PLY
    Project(ProjectArgs),
    /// Score a trained model (or the Otsu baseline) on a suite and write the metrics CSV
    Evaluate(EvaluateArgs),
    /// Export one slice of a volume as an 8-bit PGM
    ExportSlice(ExportSliceArgs),
    /// Export a labelled LA surface as a PLY point cloud
    ExportMesh(ExportMeshArgs),
    /// Run an experiment preset (ablation, beta sweep, DPM-variant sweep)
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenPhantomArgs {
    /// Output directory for the suite
    #[arg(long, env = "SCARQ_OUT_DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n_train: usize,
    #[arg(long, default_value_t = 5)]
    pub n_test: usize,
    /// Edge length of the cubic grid in voxels
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Blood-bright spheres placed outside the atrium in every case
    #[arg(long, default_value_t = 0)]
    pub confounders: usize,
}

#[derive(Debug, Args)]
pub struct DtmArgs {
    /// Binary label volume (MVOL)
    #[arg(long)]
    pub label: PathBuf,
    /// Output distance volume (MVOL)
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Distance clip applied before the exponent
    #[arg(long, default_value_t = 50.0)]
    pub clip: f64,
    /// Measure distances in mm using the voxel spacing
    #[arg(long)]
    pub spacing_aware: bool,
}

#[derive(Debug, Args)]
pub struct DpmArgs {
    /// Wall/scar label volume with alphabet {0,1,2} (MVOL)
    #[arg(long)]
    pub label: PathBuf,
    /// Output directory for normal.mvol, scar.mvol and, for normalized variants, background.mvol
    #[arg(long)]
    pub out: PathBuf,
    /// exp | expit | exp-norm | expit-norm
    #[arg(long, default_value_t = DpmVariant::Exp)]
    pub variant: DpmVariant,
}

#[derive(Debug, Args)]
pub struct ObjectiveArgs {
    /// Balancing weights, e.g. la=0.01,scar=10,m1=0.01,m2=0.001
    #[arg(long, default_value = "la=0.01,scar=10,m1=0.01,m2=0.001")]
    pub weights: String,
    /// Term set: bce | se | sesa
    #[arg(long, default_value_t = Arm::Sesa)]
    pub arm: Arm,
    /// differentiable | stop-gradient
    #[arg(long, default_value = "differentiable")]
    pub m2_mode: M2Mode,
    /// l2 | hellinger
    #[arg(long, default_value_t = ScarMetric::L2)]
    pub scar_metric: ScarMetric,
    /// DPM construction: exp | expit | exp-norm | expit-norm
    #[arg(long, default_value_t = DpmVariant::Exp)]
    pub variant: DpmVariant,
    /// Exponent of the LA distance map
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
}

#[derive(Debug, Args)]
pub struct LossEvalArgs {
    /// Predicted LA probability (MVOL)
    #[arg(long)]
    pub la_pred: PathBuf,
    /// Predicted normal-wall channel (MVOL)
    #[arg(long)]
    pub normal_pred: PathBuf,
    /// Predicted scar channel (MVOL)
    #[arg(long)]
    pub scar_pred: PathBuf,
    /// Ground-truth LA label (MVOL)
    #[arg(long)]
    pub la: PathBuf,
    /// Ground-truth wall/scar label (MVOL)
    #[arg(long)]
    pub wall_scar: PathBuf,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    /// Divide every term by the voxel count instead of summing
    #[arg(long)]
    pub mean: bool,
    /// Output JSON report; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainOptions {
    /// field | conv
    #[arg(long, default_value_t = ModelKind::Conv)]
    pub kind: ModelKind,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    /// Initial learning rate [default: 0.1, or 1e-3 with --long-schedule]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Iterations between learning-rate divisions by 10 [default: 400, or 4000 with --long-schedule]
    #[arg(long)]
    pub lr_step: Option<usize>,
    /// Use lr 1e-3 divided by 10 every 4000 iterations
    #[arg(long)]
    pub long_schedule: bool,
    /// Cases per SGD step
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Sum the objective over voxels instead of averaging
    #[arg(long)]
    pub sum: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Suite directory written by gen-phantom
    #[arg(long)]
    pub suite: PathBuf,
    /// Output directory for the checkpoint, log and config
    #[arg(long, env = "SCARQ_OUT_DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOptions,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Wall/scar label to project (MVOL)
    #[arg(long)]
    pub scar: PathBuf,
    /// LA label whose boundary receives the labels (MVOL)
    #[arg(long)]
    pub surface_from: PathBuf,
    /// Search radius in voxels
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    /// Output PLY
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    /// Ground-truth LA boundary labelled by Otsu thresholding of nearby wall intensity
    Otsu,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Suite directory written by gen-phantom
    #[arg(long)]
    pub suite: PathBuf,
    /// Checkpoint directory written by train
    #[arg(
        long,
        required_unless_present = "baseline",
        conflicts_with = "baseline"
    )]
    pub model: Option<PathBuf>,
    /// Score a baseline instead of a model
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Projection radius in voxels
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    /// Percentile for HD (100 = maximum)
    #[arg(long, default_value_t = 100.0)]
    pub hd_percentile: f64,
    /// Output CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportSliceArgs {
    /// Volume to slice (MVOL)
    #[arg(long)]
    pub volume: PathBuf,
    /// x | y | z
    #[arg(long, default_value_t = Axis::Z)]
    pub axis: Axis,
    /// Slice index; the middle slice when omitted
    #[arg(long)]
    pub index: Option<usize>,
    /// Intensity window lo,hi; the volume range when omitted
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub window: Option<Vec<f64>>,
    /// Output PGM
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportMeshArgs {
    /// Checkpoint directory; labels the predicted LA boundary of --image
    #[arg(long, requires = "image", conflicts_with_all = ["la", "wall_scar"])]
    pub model: Option<PathBuf>,
    /// Intensity volume for --model (MVOL)
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// LA label whose boundary is exported (MVOL)
    #[arg(long, requires = "wall_scar", required_unless_present = "model")]
    pub la: Option<PathBuf>,
    /// Wall/scar label projected onto the --la boundary (MVOL)
    #[arg(long)]
    pub wall_scar: Option<PathBuf>,
    /// Projection radius in voxels for --la/--wall-scar
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    /// Output PLY
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Preset {
    /// BCE, SE and SESA arms plus the Otsu baseline
    AblationTable2Shape,
    /// SESA arm at each LA distance-map exponent
    BetaSweep,
    /// SESA arm for every DPM variant and scar metric
    DpmVariantSweep,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    /// Suite directory written by gen-phantom
    #[arg(long)]
    pub suite: PathBuf,
    /// Output directory
    #[arg(long, env = "SCARQ_OUT_DIR")]
    pub out: PathBuf,
    /// Training seeds; the global --seed when omitted
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Exponents for beta_sweep
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    pub betas: Vec<f64>,
    /// Write the expanded plan and stop
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub train: TrainOptions,
}

/// Exit code of each error category; 2 is reserved for command-line usage errors.
pub fn exit_code(category: &str) -> u8 {
    match category {
        "usage" => 2,
        "io" => 3,
        "format" => 4,
        "grid-mismatch" => 5,
        "label-alphabet" => 6,
        "empty-class" => 7,
        "degenerate" => 8,
        "out-of-range" => 9,
        "invalid-argument" => 10,
        "infeasible" => 11,
        "diverged" => 12,
        _ => 1,
    }
}

fn fail(category: &str, message: &str) -> ExitCode {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error category={category} message={message:?}");
    ExitCode::from(exit_code(category))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            // clap spreads one error over several lines; keep everything before the usage hint
            let text = e.to_string();
            let message: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            return fail("usage", message.join(" ").trim_start_matches("error: "));
        }
    };
    if cli.jobs == 0 {
        return fail("usage", "--jobs must be at least 1");
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.category(), &e.to_string()),
    }
}
