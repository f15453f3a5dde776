//! Experiment driver: run configuration, the SLU model wrapper, optimizers,
//! checkpoints, run logs, the training loop and the ablation / sweep grids.

pub mod checkpoint;
mod config;
mod experiments;
mod log;
mod optim;
mod slu;
mod trainer;

pub use config::{
    apply_override, Ablation, DataConfig, ModelConfig, OptimizerConfig, OptimizerKind, RouteConfig, RunConfig,
    TaskConfig,
};
pub use experiments::{
    ablate, default_workers, median, median_report, parallel_map, route_grid, run_cells, select_fixed_positions,
    sweep, time_predictions, Cell, ResultsTable, SweepParam, SweepRow, SweepSummary,
};
pub use log::{RunLog, RunSummary, StepRecord};
pub use optim::{clip_grad_norm, Optimizer};
pub use slu::{label_count, model_spec, task_level, SluModel};
pub use trainer::{
    evaluate, evaluate_with_predictions, log_softmax, prepare_data, report_line, selection_score, train,
    train_to_dir, Dataset, Predictions, Trained, TrainOutcome, SETTING_RANGE_PCT,
};
