//! The three training steps and the regrouping that connects them.

pub mod branch;
pub mod dual;
pub mod generator;
pub mod log;
pub mod optim;
pub mod regroup;

pub use branch::{branch_out, BranchPlan, ConvergenceRecord};
pub use dual::{teacher_predictions, train_dual, train_dual_block};
pub use generator::{
    generator_filters, synthesize_images, synthesize_training_set, teacher_hashes, train_generator, GeneratorOptions,
};
pub use log::{LogRow, TrainingLog};
pub use optim::{OptimConfig, Optimizer, OptimizerKind, Schedule};
pub use regroup::{
    batched, branch_columns, fine_tune, predict_customized, predict_teacher, regroup, train_branches, ImageSource,
};
