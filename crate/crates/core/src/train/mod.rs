//! Optimizer, schedule, checkpoints, the training loop, evaluation and ablations.

mod ablate;
mod check;
mod checkpoint;
mod config;
mod eval;
mod optim;
mod run;

pub use ablate::{
    ablate, ablation_data, grid_points, parse_grid, write_ablation_csv, AblationProgress, AblationRow, AblationSpec,
    SINGLE,
};
pub use check::{objective_gradcheck, objective_gradcheck_for};
pub use checkpoint::Checkpoint;
pub use config::{LossKind, TrainConfig, KEYS};
pub use eval::{
    accuracy, classify_eval, evaluate, metric_columns, tta_predict, tta_predict_dataset, write_metrics_csv,
    MetricReport, MetricRow,
};
pub use optim::{lr_schedule_step, rmsprop_step, PlateauSchedule, RmsProp, RMSPROP_EPS, RMSPROP_GAMMA};
pub use run::{
    augmentation_crop, epoch_lr, epoch_order, metric_rows, train, train_epoch, train_from, write_learning_curve, write_run,
    EpochRecord, RunFiles, TrainOutcome,
};
