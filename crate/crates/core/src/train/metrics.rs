use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("prediction has {pred} values but truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("metrics need at least one value")]
    Empty,
}

fn check(pred: &[f64], truth: &[f64]) -> Result<(), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// `(1/n) Σ (Cₖ − Cₖ*)²`
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// `(1/n) Σ |Cₖ − Cₖ*|`
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// `sqrt(mse)`
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    mse(pred, truth).map(libm::sqrt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
}

impl Metrics {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self, MetricError> {
        Ok(Metrics {
            mse: mse(pred, truth)?,
            mae: mae(pred, truth)?,
            rmse: rmse(pred, truth)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn identical_vectors() {
        let v = [0.3, -1.0, 2.5];
        let m = Metrics::compute(&v, &v).unwrap();
        assert_eq!((m.mse, m.mae, m.rmse), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_example() {
        let m = Metrics::compute(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!((m.mse - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.mae - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.rmse - 0.816_496_580_927_726).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(mse(&[1.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch { pred: 1, truth: 2 }));
        assert_eq!(mae(&[], &[]), Err(MetricError::Empty));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rmse_squared_is_mse_and_mae_bounded(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..64)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = Metrics::compute(&p, &t).unwrap();
            prop_assert!((m.rmse * m.rmse - m.mse).abs() <= 1e-12 * m.mse.max(1.0));
            prop_assert!(m.mae <= m.rmse * (1.0 + 1e-12));
        }
    }
}
