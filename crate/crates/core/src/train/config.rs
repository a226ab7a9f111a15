use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::{ModelVariant, NetworkShape};
use crate::train::features::FEATURE_COUNT;

/// Batch sizes searched by default.
pub const BATCH_SIZES: [usize; 2] = [32, 64];
/// Epoch counts searched by default.
pub const EPOCHS: [usize; 4] = [100, 200, 300, 400];
/// Learning rates searched by default.
pub const LEARNING_RATES: [f64; 3] = [1e-3, 1e-4, 1e-5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub window_len: usize,
    pub seed: u64,
    pub model_variant: ModelVariant,
    /// One model per cell (C-rate regime) instead of one pooled model.
    pub per_c_rate: bool,
    pub dropout_rate: f64,
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub hidden: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        let shape = NetworkShape::default();
        TrainConfig {
            batch_size: BATCH_SIZES[0],
            epochs: EPOCHS[0],
            learning_rate: LEARNING_RATES[0],
            window_len: 1,
            seed: 0,
            model_variant: ModelVariant::EkfCnnLstm,
            per_c_rate: true,
            dropout_rate: 0.2,
            filters: shape.filters,
            kernel: shape.kernel,
            pool: shape.pool,
            hidden: shape.hidden,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate must be positive"));
        }
        if self.window_len == 0 {
            return Err(TrainError::InvalidConfig("window length must be >= 1"));
        }
        if self.window_len < self.kernel {
            return Err(TrainError::InvalidConfig("window length must be at least the kernel size"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TrainError::InvalidConfig("dropout rate must lie in [0, 1)"));
        }
        if self.filters == 0 || self.kernel == 0 || self.pool == 0 || self.hidden.contains(&0) {
            return Err(TrainError::InvalidConfig("layer sizes must be >= 1"));
        }
        Ok(())
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            features: FEATURE_COUNT,
            window_len: self.window_len,
            filters: self.filters,
            kernel: self.kernel,
            pool: self.pool,
            hidden: self.hidden,
        }
    }
}

/// Hyperparameter sets to combine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainGrid {
    pub batch_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

impl Default for TrainGrid {
    fn default() -> Self {
        TrainGrid {
            batch_sizes: BATCH_SIZES.to_vec(),
            epochs: EPOCHS.to_vec(),
            learning_rates: LEARNING_RATES.to_vec(),
        }
    }
}

impl TrainGrid {
    pub fn len(&self) -> usize {
        self.batch_sizes.len() * self.epochs.len() * self.learning_rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every combination applied to `base`, batch size outermost, epochs innermost.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &batch_size in &self.batch_sizes {
            for &learning_rate in &self.learning_rates {
                for &epochs in &self.epochs {
                    out.push(TrainConfig {
                        batch_size,
                        learning_rate,
                        epochs,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.epochs, c.learning_rate, c.window_len), (32, 100, 0.001, 1));
        assert!(c.per_c_rate);
        assert!(c.validate().is_ok());
        assert_eq!(TrainGrid::default().len(), 24);
        assert_eq!(TrainGrid::default().configs(&c).len(), 24);
    }

    #[test]
    fn validation() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            window_len: 1,
            kernel: 2,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
