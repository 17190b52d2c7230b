//! `cisnet`: data generation, cross-validated training, evaluation,
//! comparison and the subject-count ablation.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cis_core::{AlphaMode, HeadMode, Variant};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "cisnet", version, about = "Subject-deconfounded action-unit recognition on synthetic SCM data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset from an SCM spec.
    GenData(GenDataArgs),
    /// Subject-exclusive k-fold training over one or more seeds.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare a run without CIS against a run with CIS.
    Compare(CompareArgs),
    /// F1 against the number of training subjects, for both variants.
    AblateSubjects(AblateArgs),
    /// Per-subject PCC matrices of predictions and ground truth.
    AnalyzePcc(AnalyzePccArgs),
    /// Write backbone features of every sample.
    ExportFeatures(ExportArgs),
    /// Render a numeric table as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Baseline,
    Cisnet,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Cisnet => Variant::Cisnet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Sum,
    Concat,
}

impl From<HeadArg> for HeadMode {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Sum => HeadMode::Sum,
            HeadArg::Concat => HeadMode::Concat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlphaArg {
    Attention,
    Uniform,
}

impl From<AlphaArg> for AlphaMode {
    fn from(a: AlphaArg) -> Self {
        match a {
            AlphaArg::Attention => AlphaMode::Attention,
            AlphaArg::Uniform => AlphaMode::Uniform,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// SCM spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, or a `.jsonl` file path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Model and optimizer settings shared by `train` and `ablate-subjects`.
#[derive(Debug, Clone, Args)]
pub struct TrainingFlags {
    /// TOML run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// SCM spec of the dataset, enabling oracle alignment.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub head: Option<HeadArg>,
    #[arg(long, value_enum)]
    pub alpha: Option<AlphaArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub kfold: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Comma-separated subjects to evaluate on (default: all).
    #[arg(long, value_delimiter = ',')]
    pub subjects: Option<Vec<usize>>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run without CIS.
    pub without: PathBuf,
    /// Run with CIS.
    pub with: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated training-subject counts.
    #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
    pub grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Held-out test subjects per seed (default: all subjects beyond the largest m).
    #[arg(long)]
    pub test_subjects: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct AnalyzePccArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub subjects: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Comma-separated table; the first column is the x axis.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data::run(a),
        Command::Train(a) => commands::train::run(a).map(|_| ()),
        Command::Eval(a) => commands::eval::run(a),
        Command::Compare(a) => commands::compare::run(a).map(|_| ()),
        Command::AblateSubjects(a) => commands::ablate::run(a).map(|_| ()),
        Command::AnalyzePcc(a) => commands::analyze_pcc::run(a),
        Command::ExportFeatures(a) => commands::export::run(a),
        Command::Plot(a) => commands::plot::run(a),
    }
}
