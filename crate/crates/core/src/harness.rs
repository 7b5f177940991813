//! Training, evaluation, checkpoints and CSV reports.

mod checkpoint;
mod config;
mod eval;
mod gradient_suite;
mod train;

pub use checkpoint::{Checkpoint, OptimizerRecord, TensorRecord};
pub use config::{AlignSetting, TrainConfig};
pub use eval::{
    accuracies, evaluate, evaluate_instance, gold_similarities, histogram, similarity_histogram, EvalMetrics, HistBin,
    InstanceOutcome,
};
pub use gradient_suite::{full_loss_gradcheck, GRADCHECK_TOL};
pub use train::{
    load_model, sweep, sweep_rows_to_csv, train, train_on, training_step, EpochRecord, StepLosses, SweepRow,
    TrainOutcome, TrainReport,
};

/// CSV with a header row for any serializable records.
pub fn records_to_csv<T: serde::Serialize>(rows: &[T]) -> crate::Result<String> {
    train::to_csv(rows)
}

#[cfg(test)]
mod tests;
