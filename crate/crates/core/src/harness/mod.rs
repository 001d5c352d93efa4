//! Experiment driver: configuration, training, evaluation, diagnostics,
//! and reports.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod report;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{DataConfig, EvalConfig, ModelConfig, OptimConfig, RunConfig};
pub use gradcheck::{gradcheck, gradcheck_with_fault, GradcheckReport, ThetaComponent};
pub use metrics::{evaluate, AttackStats, EvalReport, MetricsReport, TrainingCurves};
pub use train::{
    ablate, alpha_study, default_ablation_masks, gen_data, prepare_test_data, prepare_train_data,
    run_eval, train, train_with_data, AblationReport, AblationRow, AlphaStudyReport, TrainMode,
    TrainOutput,
};
