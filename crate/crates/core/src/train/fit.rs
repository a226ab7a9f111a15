//! Minibatch Adam training, evaluation and the hyperparameter grid.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, TrainGrid};
use super::features::{PreparedRegime, Sample, Window, FEATURE_COUNT, PRIOR_CAPACITY};
use super::metrics::{mse, Metrics};
use super::TrainError;
use crate::nn::{accumulate_backward, adam_update, network_forward, AdamConfig, AdamState, Mode, NetworkParams, Tensor};
use crate::seed::{child_seed, rng_from};

/// Loss traces and final test metrics of one training run. All losses are
/// MSE on the scaled target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub label: String,
    pub config: TrainConfig,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub final_metrics: Metrics,
    pub n_train: usize,
    pub n_test: usize,
    pub out_of_range_test_values: usize,
    /// Filled in by callers that have a clock.
    pub wall_clock_s: Option<f64>,
}

/// Seed used for a regime: the run seed split by the regime label.
pub fn regime_seed(seed: u64, label: &str) -> u64 {
    child_seed(seed, label)
}

/// Predictions for each window with dropout off.
pub fn predict(params: &NetworkParams, windows: &[Window]) -> Result<Vec<f64>, TrainError> {
    let mut rng = rng_from(0);
    windows
        .iter()
        .map(|w| Ok(network_forward(params, &w.input, Mode::Infer, &mut rng)?.0))
        .collect()
}

/// Teacher-forced metrics: the prior-capacity feature is the measured value.
pub fn evaluate(params: &NetworkParams, windows: &[Window]) -> Result<Metrics, TrainError> {
    let pred = predict(params, windows)?;
    let truth: Vec<f64> = windows.iter().map(|w| w.target).collect();
    Ok(Metrics::compute(&pred, &truth)?)
}

/// Autoregressive metrics: within each step, the prior-capacity feature is the
/// model's own previous prediction. Step starts use the known value 0, and a
/// run that opens mid-step keeps its last measured value.
pub fn evaluate_autoregressive(params: &NetworkParams, regime: &PreparedRegime) -> Result<Metrics, TrainError> {
    let len = regime.window_len;
    let mut rng = rng_from(0);
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for run in &regime.test_rows {
        let mut samples: Vec<Sample> = Vec::with_capacity(run.len());
        let mut predicted_capacity: Vec<f64> = Vec::with_capacity(run.len());
        for (j, row) in run.iter().enumerate() {
            let mut row = row.clone();
            if j > 0 && !row.step_start {
                row.features[PRIOR_CAPACITY] = predicted_capacity[j - 1];
            }
            samples.push(regime.scaler.sample(&row));
            if j + 1 < len {
                predicted_capacity.push(row.capacity_ah);
                continue;
            }
            let mut data = Vec::with_capacity(len * FEATURE_COUNT);
            for s in &samples[j + 1 - len..=j] {
                data.extend_from_slice(&s.features);
            }
            let input = Tensor::new(alloc::vec![len, FEATURE_COUNT], data)?;
            let y = network_forward(params, &input, Mode::Infer, &mut rng)?.0;
            pred.push(y);
            truth.push(samples[j].target);
            predicted_capacity.push(regime.scaler.target.unscale(0, y));
        }
    }
    Ok(Metrics::compute(&pred, &truth)?)
}

/// Final state of a training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub params: NetworkParams,
    pub adam: AdamState,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
}

/// Raw training loop. Calls `snapshot(epoch, params)` after every epoch
/// listed in `snapshots` (0 means before the first epoch).
pub fn fit(
    train: &[Window],
    test: &[Window],
    config: &TrainConfig,
    seed: u64,
    snapshots: &[usize],
    mut snapshot: impl FnMut(usize, &NetworkParams) -> Result<(), TrainError>,
) -> Result<Fitted, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if test.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let mut params = NetworkParams::init(
        config.model_variant,
        config.shape(),
        config.dropout_rate,
        &mut rng_from(child_seed(seed, "init")),
    )?;
    let mut shuffle_rng = rng_from(child_seed(seed, "shuffle"));
    let mut dropout_rng = rng_from(child_seed(seed, "dropout"));
    let adam_config = AdamConfig::with_learning_rate(config.learning_rate);
    let mut adam = AdamState::new(&params);
    let mut grad = params.zeros_like();
    let test_truth: Vec<f64> = test.iter().map(|w| w.target).collect();

    if snapshots.contains(&0) {
        snapshot(0, &params)?;
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut test_loss = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut squared = 0.0;
        for batch in order.chunks(config.batch_size) {
            for t in grad.tensors_mut() {
                t.data_mut().fill(0.0);
            }
            let scale = 2.0 / batch.len() as f64;
            for &i in batch {
                let w = &train[i];
                let (y, cache) = network_forward(&params, &w.input, Mode::Train, &mut dropout_rng)?;
                let e = y - w.target;
                squared += e * e;
                accumulate_backward(&params, &cache, scale * e, &mut grad)?;
            }
            adam_update(&mut params, &grad, &mut adam, &adam_config)?;
        }
        train_loss.push(squared / train.len() as f64);
        test_loss.push(mse(&predict(&params, test)?, &test_truth)?);
        if snapshots.contains(&epoch) {
            snapshot(epoch, &params)?;
        }
    }
    Ok(Fitted {
        params,
        adam,
        train_loss,
        test_loss,
    })
}

/// Trains one model on a prepared regime.
pub fn train_model(regime: &PreparedRegime, config: &TrainConfig) -> Result<(NetworkParams, TrainReport), TrainError> {
    let (fitted, report) = train_regime(regime, config)?;
    Ok((fitted.params, report))
}

/// [`train_model`], keeping the optimizer state.
pub fn train_regime(regime: &PreparedRegime, config: &TrainConfig) -> Result<(Fitted, TrainReport), TrainError> {
    let seed = regime_seed(config.seed, regime.label.as_str());
    let fitted = fit(&regime.train, &regime.test, config, seed, &[], |_, _| Ok(()))?;
    let final_metrics = evaluate(&fitted.params, &regime.test)?;
    let report = TrainReport {
        label: regime.label.as_str().to_string(),
        config: config.clone(),
        train_loss: fitted.train_loss.clone(),
        test_loss: fitted.test_loss.clone(),
        final_metrics,
        n_train: regime.train.len(),
        n_test: regime.test.len(),
        out_of_range_test_values: regime.out_of_range_test_values,
        wall_clock_s: None,
    };
    Ok((fitted, report))
}

/// One grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub config: TrainConfig,
    pub test_mse: f64,
    pub metrics: Metrics,
}

/// Trains every combination of `grid` on top of `base` and ranks them by
/// final test MSE (ties keep grid order).
///
/// Runs that differ only in epoch count share one trajectory: the model
/// after `e` epochs of the longest run is exactly the model a separate
/// `e`-epoch run would produce.
pub fn grid_search(regime: &PreparedRegime, grid: &TrainGrid, base: &TrainConfig) -> Result<Vec<GridResult>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let seed = regime_seed(base.seed, regime.label.as_str());
    let mut epochs: Vec<usize> = grid.epochs.clone();
    epochs.sort_unstable();
    epochs.dedup();
    let longest = *epochs.last().expect("non-empty grid");
    let mut results = Vec::with_capacity(grid.len());
    for &batch_size in &grid.batch_sizes {
        for &learning_rate in &grid.learning_rates {
            let config = TrainConfig {
                batch_size,
                learning_rate,
                epochs: longest,
                ..base.clone()
            };
            let mut found: Vec<(usize, Metrics)> = Vec::new();
            fit(&regime.train, &regime.test, &config, seed, &epochs, |epoch, params| {
                found.push((epoch, evaluate(params, &regime.test)?));
                Ok(())
            })?;
            for &e in &grid.epochs {
                let metrics = found.iter().find(|(epoch, _)| *epoch == e).expect("snapshot taken").1;
                results.push(GridResult {
                    config: TrainConfig {
                        epochs: e,
                        ..config.clone()
                    },
                    test_mse: metrics.mse,
                    metrics,
                });
            }
        }
    }
    results.sort_by(|a, b| a.test_mse.total_cmp(&b.test_mse));
    Ok(results)
}
