//! `detlab` — workbench for detection label assignment, multi-scale max
//! filtering, NMS variants and COCO-protocol evaluation.
//!
//! Exit codes: 0 ok, 1 validation failure, 2 I/O failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError::Io(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<detlab_core::Error> for CliError {
    fn from(e: detlab_core::Error) -> Self {
        match e {
            detlab_core::Error::Io(inner) => CliError::Io(inner.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "detlab", version, about = "Detection label-assignment and filtering workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assign ground truths to predictions under a named rule
    Assign(AssignArgs),
    /// Evaluate detections against annotations under the COCO protocol
    Eval(EvalArgs),
    /// Run the 3D max filter over a pyramid dump (soft or hard mode)
    Filter(FilterArgs),
    /// Generate seeded synthetic scenes and run the assignment/NMS study
    Simulate(SimulateArgs),
    /// Compare NMS restrictions on the multi-scale duplicate oracle
    NmsStudy(NmsStudyArgs),
    /// Check analytic refinement gradients against central differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct AssignArgs {
    /// COCO-format annotation file
    #[arg(long)]
    annotations: PathBuf,
    /// JSON array of prediction records
    #[arg(long)]
    predictions: PathBuf,
    /// One of: poto, anchor, center, fcos, atss, quality_atss, quality_fcos,
    /// quality_topk, loss_cost
    #[arg(long)]
    rule: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    focal_alpha: Option<f64>,
    #[arg(long)]
    regression_weight: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// JSON array of detection records
    #[arg(long)]
    detections: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Apply NMS before evaluating
    #[arg(long)]
    nms: bool,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    across_scales: Option<bool>,
    /// Odd window in cells, or `inf`
    #[arg(long)]
    spatial_range: Option<String>,
    #[arg(long)]
    score_floor: Option<f64>,
}

#[derive(Args)]
struct FilterArgs {
    /// Pyramid dump to read
    #[arg(long)]
    input: PathBuf,
    /// soft keeps tube maxima values everywhere, hard zeroes non-maxima
    #[arg(long, default_value = "soft")]
    mode: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    phi: Option<usize>,
}

#[derive(Args, Clone)]
struct SceneFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images: Option<usize>,
    /// Square image side in pixels
    #[arg(long)]
    image_size: Option<f64>,
    #[arg(long)]
    min_instances: Option<usize>,
    #[arg(long)]
    max_instances: Option<usize>,
    #[arg(long)]
    size_min: Option<f64>,
    #[arg(long)]
    size_max: Option<f64>,
    #[arg(long)]
    crowding: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    duplicates: Option<usize>,
    #[arg(long)]
    score_decay: Option<f64>,
    #[arg(long)]
    box_jitter: Option<f64>,
    #[arg(long)]
    cross_level_leak: Option<f64>,
    #[arg(long)]
    loc_noise: Option<f64>,
    #[arg(long)]
    score_jitter: Option<f64>,
    /// Odd cell window for duplicate placement
    #[arg(long)]
    spread: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    scene: SceneFlags,
    /// Comma-separated rule names
    #[arg(long)]
    rules: Option<String>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct NmsStudyArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    scene: SceneFlags,
    #[arg(long)]
    iou_threshold: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    phi: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Thread count for image-parallel work, from `DETLAB_THREADS`.
fn init_threads() {
    if let Ok(n) = std::env::var("DETLAB_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Assign(args) => commands::cmd_assign(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Filter(args) => commands::cmd_filter(args),
        Command::Simulate(args) => commands::cmd_simulate(args),
        Command::NmsStudy(args) => commands::cmd_nms_study(args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not failures; anything else is a usage error
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
