//! The `pointq` command line: every workflow stage writes its artifacts and a
//! manifest under `<runs>/<name>/<stage>/`.

pub mod commands;
pub mod error;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pointq_core::synth::PointMode;

pub use commands::execute;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pointq", version, about = "Weakly semi-supervised detection from point annotations")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Root directory holding all runs.
    #[arg(long, global = true, env = "POINTQ_RUNS", default_value = "runs")]
    pub runs: PathBuf,
    /// Run name; stages of one run share `<runs>/<name>/`.
    #[arg(long, global = true, default_value = "desk")]
    pub name: String,
    /// Experiment config as JSON (see `print-config`); defaults to the desk setup.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Share of training scenes with full boxes.
    #[arg(long, global = true)]
    pub fraction: Option<f64>,
    /// Where weak-set points are placed on each object.
    #[arg(long, global = true, value_parser = parse_point_mode)]
    pub point_mode: Option<PointMode>,
    /// Treat a config mismatch with an upstream stage as an error.
    #[arg(long, global = true)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TeacherVariant {
    Main,
    PosOnly,
    CatOnly,
    Absolute,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective experiment config as JSON.
    PrintConfig,
    /// Generate the train and test datasets.
    GenData,
    /// Train a point-conditioned teacher on the fully labeled scenes.
    TrainTeacher {
        #[arg(long, value_enum, default_value = "main")]
        variant: TeacherVariant,
    },
    /// Label the weak scenes with a teacher.
    PseudoLabel {
        /// Threshold the supervised set-prediction model instead of querying
        /// the point teacher.
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = 0.7)]
        tau: f64,
        /// Teacher stage to load (point mode only).
        #[arg(long, default_value = "teacher")]
        teacher: String,
    },
    /// Train a set-prediction student.
    TrainStudent {
        /// Train on the fully labeled scenes only.
        #[arg(long, conflicts_with = "pseudo")]
        supervised_only: bool,
        /// Pseudo-label stage to train on.
        #[arg(long, default_value = "pseudo")]
        pseudo: String,
    },
    /// COCO-style evaluation of a set-prediction model on the test set.
    Evaluate {
        #[arg(long, default_value = "student")]
        model: String,
    },
    /// TIDE error breakdown of a set-prediction model on the test set.
    Diagnose {
        #[arg(long, default_value = "student")]
        model: String,
    },
    /// All stages plus the teacher ablations in one process.
    RunExperiment,
    /// AP versus data fraction for the point teacher, the thresholded
    /// baseline and supervised-only training.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
    },
}

fn parse_point_mode(s: &str) -> Result<PointMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown point mode {s:?}; expected mask, bbox or center"))
}
