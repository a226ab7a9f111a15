//! Capacity-model training: feature preparation, the training loop, error
//! metrics and the hyperparameter grid.

pub mod config;
pub mod features;
pub mod fit;
pub mod metrics;

use thiserror::Error;

use crate::nn::NnError;
use crate::types::CellId;

pub use config::{TrainConfig, TrainGrid};
pub use features::{
    feature_rows, make_windows, minmax_apply, minmax_fit, prepare, split_70_30, FeatureRow, NormalizerStats, PreparedRegime, Sample,
    Scaler, Window, FEATURE_NAMES,
};
pub use fit::{
    evaluate, evaluate_autoregressive, fit, grid_search, predict, regime_seed, train_model, train_regime, Fitted, GridResult, TrainReport,
};
pub use metrics::{mae, mse, rmse, MetricError, Metrics};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training partition is empty")]
    EmptyTrainSet,
    #[error("test partition is empty")]
    EmptyTestSet,
    #[error("need at least 2 cycles to split, found {cycles}")]
    TooFewCycles { cycles: usize },
    #[error("cell {cell}: need at least 2 cycles to split, found {cycles}")]
    TooFewCyclesInCell { cell: CellId, cycles: usize },
    #[error("row has {got} columns, expected {expected}")]
    RaggedRows { expected: usize, got: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl TrainError {
    pub(crate) fn for_cell(self, cell: &CellId) -> Self {
        match self {
            TrainError::TooFewCycles { cycles } => TrainError::TooFewCyclesInCell {
                cell: cell.clone(),
                cycles,
            },
            other => other,
        }
    }
}
