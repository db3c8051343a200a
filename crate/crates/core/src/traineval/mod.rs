//! Training, evaluation and the layer-selection harness.

mod evaluate;
mod grid;
mod metrics;
mod split;
mod train;

pub use evaluate::{evaluate, evaluate_predictions, EvalConfig, MetricUnits, Protocol, ScenePrediction};
pub use grid::{layer_grid, LayerGrid, LayerGridConfig};
pub use metrics::{ade, fde, Dims, MetricsReport};
pub use split::{split_scenes, DataSplit, SplitFractions};
pub use train::{
    load_model, lr_at, save_model, train, write_log, write_log_header, write_log_record, CheckpointMeta, EpochRecord, TrainConfig, TrainOutcome,
};
