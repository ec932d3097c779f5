//! Self-training with point annotations: train a point-conditioned teacher on
//! the fully labeled scenes, label the weak scenes with it, then train a
//! set-prediction student on both.

pub mod error;
pub mod experiment;
pub mod plan;
pub mod pseudo;
pub mod train;
pub mod views;

pub use error::PipelineError;
pub use experiment::{
    desk_teacher, learning_curves_csv, run_experiment, run_sweep, score_point_labels, sweep_csv, Ablations,
    BaselineReport, ExperimentConfig, ExperimentReport, StudentReport, SweepRow, TeacherReport, SWEEP_METHODS,
};
pub use plan::TrainPlan;
pub use pseudo::{
    detect, generate_pseudo_labels, generate_pseudo_labels_baseline, load_pseudo_labels, save_pseudo_labels,
    BaselineScore, PseudoLabel, POINT_PSEUDO_SCORE,
};
pub use train::{train_student, train_teacher, Trained};
pub use views::{ground_truth, split_view, weak_ground_truth, FullImage, SplitView, WeakImage};
