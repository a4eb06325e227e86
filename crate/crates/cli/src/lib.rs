//! Batch front end for skelkit: keypoint fitting, mesh conversion,
//! pseudo-label refinement, evaluation, joint-limit audits and mesh export.
//!
//! Exit codes: 0 on success, 2 for bad input, 3 for numerical failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use skelkit::InitPolicy;

use crate::commands::{FitInit, Metric, ALL_METRICS, CROP_EXTENT};
use crate::config::{FileConfig, Overrides, RunConfig};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "skelkit", version, about = "Skeleton body model fitting and evaluation")]
pub struct Cli {
    /// Body model definition (JSON).
    #[arg(long, global = true, env = "SKELKIT_MODEL", value_name = "FILE")]
    pub model: Option<PathBuf>,

    /// Use the built-in toy model instead of a model file.
    #[arg(long, global = true)]
    pub toy_model: bool,

    /// TOML file with defaults for any of the options below.
    #[arg(long, global = true, env = "SKELKIT_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every random perturbation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (0 picks one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit pose, shape and camera to the 2D keypoints of every dataset record.
    Fit(FitArgs),
    /// Fit the model to a target surface mesh.
    Convert(ConvertArgs),
    /// Refit dataset records and keep fits that lower the stored objective.
    Refine(RefineArgs),
    /// Compare predictions against ground truth.
    Eval(EvalArgs),
    /// Tabulate how often joint rotations exceed their limits.
    Audit(AuditArgs),
    /// Write the posed surface mesh for a parameter set.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset records (JSON Lines).
    #[arg(long = "in", env = "SKELKIT_IN", value_name = "FILE")]
    pub input: PathBuf,
    /// One fit result per record (JSON Lines).
    #[arg(long, env = "SKELKIT_OUT", value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "regressor")]
    pub init: FitInit,
    /// Uniform noise in radians added to every rotational DoF of the start.
    #[arg(long)]
    pub init_noise: Option<f64>,
    /// Also write each fitted mesh as `<example_id>.obj` into this directory.
    #[arg(long, value_name = "DIR")]
    pub mesh_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Target mesh (OBJ) with the model's vertex order.
    #[arg(long = "in", env = "SKELKIT_IN", value_name = "FILE")]
    pub input: PathBuf,
    /// Fitted parameters and residuals (JSON).
    #[arg(long, env = "SKELKIT_OUT", value_name = "FILE")]
    pub out: PathBuf,
    /// Starting parameters (JSON with `q` and `beta`); rest pose otherwise.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub init_noise: Option<f64>,
    /// Mean vertex error above which the result is flagged.
    #[arg(long)]
    pub residual_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long = "in", env = "SKELKIT_IN", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, env = "SKELKIT_OUT", value_name = "FILE")]
    pub out: PathBuf,
    /// regressor-estimate, existing-pseudo-gt or best-of-both.
    #[arg(long)]
    pub policy: Option<InitPolicy>,
    /// Refinement rounds to run back to back.
    #[arg(long)]
    pub rounds: Option<u32>,
    /// Per-round accept/reject report (JSON).
    #[arg(long, env = "SKELKIT_REPORT", value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions (JSON Lines keyed by `example_id`).
    #[arg(long = "pred", visible_alias = "in", env = "SKELKIT_IN", value_name = "FILE")]
    pub pred: PathBuf,
    /// Ground truth (JSON Lines keyed by `example_id`).
    #[arg(long, env = "SKELKIT_GT", value_name = "FILE")]
    pub gt: PathBuf,
    /// Metric table; stdout when omitted.
    #[arg(long, env = "SKELKIT_OUT", value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub metrics: Option<Vec<Metric>>,
    #[arg(long, value_delimiter = ',')]
    pub pck_thresholds: Option<Vec<f64>>,
    /// PCK distance normalizer in keypoint units.
    #[arg(long, default_value_t = CROP_EXTENT)]
    pub pck_normalizer: f64,
    /// Keypoint used to root-align MPJPE and MPVPE.
    #[arg(long, default_value_t = 0)]
    pub root: usize,
    /// Compare absolute positions without root alignment.
    #[arg(long)]
    pub no_root_align: bool,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Poses (JSON Lines with `q`, `pseudo_gt.q` or per-joint `rotations`).
    #[arg(long = "in", env = "SKELKIT_IN", value_name = "FILE")]
    pub input: PathBuf,
    /// Violation table; stdout when omitted.
    #[arg(long, env = "SKELKIT_OUT", value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Violation thresholds in degrees, ascending.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Joints to audit; every joint with a bounded rotation by default.
    #[arg(long, value_delimiter = ',')]
    pub joints: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Parameters (JSON, or JSON Lines with `--index`); rest pose when omitted.
    #[arg(long = "in", env = "SKELKIT_IN", value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Surface mesh (OBJ).
    #[arg(long, env = "SKELKIT_OUT", value_name = "FILE")]
    pub out: PathBuf,
    /// Record to export from a JSON Lines input (0-based).
    #[arg(long)]
    pub index: Option<usize>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut flags = Overrides {
        model: cli.model,
        toy_model: cli.toy_model,
        seed: cli.seed,
        jobs: cli.jobs,
        ..Default::default()
    };
    // An explicit --toy-model beats a model path that only came from the
    // environment.
    if flags.toy_model && std::env::var_os("SKELKIT_MODEL").is_some_and(|v| Some(PathBuf::from(v)) == flags.model) {
        flags.model = None;
    }
    let (name, inputs, output) = match &cli.command {
        Command::Fit(a) => {
            flags.init_noise = a.init_noise;
            ("fit", vec![a.input.clone()], Some(a.out.clone()))
        }
        Command::Convert(a) => {
            flags.init_noise = a.init_noise;
            flags.residual_threshold = a.residual_threshold;
            let mut inputs = vec![a.input.clone()];
            inputs.extend(a.init.clone());
            ("convert", inputs, Some(a.out.clone()))
        }
        Command::Refine(a) => {
            flags.policy = a.policy;
            flags.rounds = a.rounds;
            ("refine", vec![a.input.clone()], Some(a.out.clone()))
        }
        Command::Eval(a) => {
            flags.pck_thresholds = a.pck_thresholds.clone();
            ("eval", vec![a.pred.clone(), a.gt.clone()], a.out.clone())
        }
        Command::Audit(a) => {
            flags.thresholds = a.thresholds.clone();
            ("audit", vec![a.input.clone()], a.out.clone())
        }
        Command::Export(a) => ("export", a.input.iter().cloned().collect(), Some(a.out.clone())),
    };
    let config = RunConfig::merge(name, flags, file, inputs, output)?;
    eprint!("effective configuration:\n{}", config.to_toml());

    let dispatch = || match &cli.command {
        Command::Fit(a) => commands::cmd_fit(&config, a.init, a.mesh_dir.as_deref()),
        Command::Convert(a) => commands::cmd_convert(&config, a.init.as_deref()),
        Command::Refine(a) => commands::cmd_refine(&config, a.report.as_deref()),
        Command::Eval(a) => commands::cmd_eval(
            &config,
            &commands::EvalOptions {
                metrics: a.metrics.clone().unwrap_or(ALL_METRICS.to_vec()),
                root: (!a.no_root_align).then_some(a.root),
                pck_normalizer: a.pck_normalizer,
            },
        ),
        Command::Audit(a) => commands::cmd_audit(&config, a.joints.as_deref()),
        Command::Export(a) => commands::cmd_export(&config, a.index),
    };
    if config.jobs == 0 {
        dispatch()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()?
            .install(dispatch)
    }
}

/// Process exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<skelkit::Error>() {
            return if e.is_input_error() { EXIT_INPUT } else { EXIT_NUMERICAL };
        }
    }
    EXIT_INPUT
}
