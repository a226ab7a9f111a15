//! Feature rows, min-max scaling, the chronological split and windowing.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::Tensor;
use crate::segment::step_groups;
use crate::types::{CellId, CycleRecord, Dataset};

pub const FEATURE_COUNT: usize = 5;

/// Column order of every feature vector.
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = ["cycle", "time_s", "current_a", "voltage_v", "prior_capacity_ah"];

/// Index of the prior-capacity feature.
pub const PRIOR_CAPACITY: usize = 4;

/// One model input before scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub cycle: u32,
    /// First row of a charge or discharge step; its prior capacity is 0.
    pub step_start: bool,
    pub features: [f64; FEATURE_COUNT],
    pub capacity_ah: f64,
}

/// Builds `(cycle, time, current, voltage, prior capacity)` rows from the
/// charge and discharge steps of one cell. Rest samples are skipped.
///
/// The prior capacity is the previous sample's capacity within the same step
/// and 0 at the start of every step.
pub fn feature_rows(records: &[CycleRecord]) -> Vec<FeatureRow> {
    let mut out = Vec::with_capacity(records.len());
    for group in step_groups(records) {
        if !group[0].step.is_active() {
            continue;
        }
        let mut prior = 0.0;
        for (i, r) in group.iter().enumerate() {
            out.push(FeatureRow {
                cycle: r.cycle,
                step_start: i == 0,
                features: [f64::from(r.cycle), r.time_s, r.current_a, r.voltage_v, prior],
                capacity_ah: r.capacity_ah,
            });
            prior = r.capacity_ah;
        }
    }
    out
}

/// Per-column minimum and maximum of a training partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizerStats {
    pub fn columns(&self) -> usize {
        self.min.len()
    }

    /// `(x − min) / (max − min)`, or 0 for a constant column. Not clamped.
    pub fn scale(&self, column: usize, x: f64) -> f64 {
        let span = self.max[column] - self.min[column];
        if span > 0.0 {
            (x - self.min[column]) / span
        } else {
            0.0
        }
    }

    /// Inverse of [`NormalizerStats::scale`] (a constant column maps back to its value).
    pub fn unscale(&self, column: usize, y: f64) -> f64 {
        let span = self.max[column] - self.min[column];
        self.min[column] + y * span
    }
}

/// Column-wise min and max over `rows`.
pub fn minmax_fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<NormalizerStats, TrainError> {
    let first = rows.first().ok_or(TrainError::EmptyTrainSet)?.as_ref();
    let mut min = first.to_vec();
    let mut max = first.to_vec();
    for row in rows {
        let row = row.as_ref();
        if row.len() != min.len() {
            return Err(TrainError::RaggedRows {
                expected: min.len(),
                got: row.len(),
            });
        }
        for (j, &v) in row.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(NormalizerStats { min, max })
}

/// Scales every row with `stats`.
pub fn minmax_apply<R: AsRef<[f64]>>(stats: &NormalizerStats, rows: &[R]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.as_ref().iter().enumerate().map(|(j, &v)| stats.scale(j, v)).collect())
        .collect()
}

/// Scalers for the inputs and for the capacity target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub features: NormalizerStats,
    pub target: NormalizerStats,
}

impl Scaler {
    pub fn fit(rows: &[FeatureRow]) -> Result<Self, TrainError> {
        let features: Vec<[f64; FEATURE_COUNT]> = rows.iter().map(|r| r.features).collect();
        let targets: Vec<[f64; 1]> = rows.iter().map(|r| [r.capacity_ah]).collect();
        Ok(Scaler {
            features: minmax_fit(&features)?,
            target: minmax_fit(&targets)?,
        })
    }

    pub fn sample(&self, row: &FeatureRow) -> Sample {
        Sample {
            features: core::array::from_fn(|j| self.features.scale(j, row.features[j])),
            target: self.target.scale(0, row.capacity_ah),
        }
    }
}

/// A scaled row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: [f64; FEATURE_COUNT],
    pub target: f64,
}

/// Number of values outside `[0, 1]` among `samples` (features and target).
pub fn count_out_of_range(samples: &[Sample]) -> usize {
    samples
        .iter()
        .flat_map(|s| s.features.iter().chain(core::iter::once(&s.target)))
        .filter(|&&v| !(0.0..=1.0).contains(&v))
        .count()
}

/// Cycles assigned to training out of `n`: `ceil(0.7 n)`, but always leaving
/// at least one cycle for testing.
pub fn train_cycle_count(n: usize) -> Result<usize, TrainError> {
    if n < 2 {
        return Err(TrainError::TooFewCycles { cycles: n });
    }
    Ok(((7 * n).div_ceil(10)).min(n - 1))
}

/// Splits one cell's cycle indices chronologically.
pub fn split_cycles(cycles: impl IntoIterator<Item = u32>) -> Result<(BTreeSet<u32>, BTreeSet<u32>), TrainError> {
    let all: BTreeSet<u32> = cycles.into_iter().collect();
    let k = train_cycle_count(all.len())?;
    let train: BTreeSet<u32> = all.iter().copied().take(k).collect();
    let test = all.difference(&train).copied().collect();
    Ok((train, test))
}

/// Per cell, the first `ceil(0.7 n)` cycles go to the training set and the
/// rest to the test set.
pub fn split_70_30(dataset: &Dataset) -> Result<(Dataset, Dataset), TrainError> {
    let mut train = Dataset {
        provenance: dataset.provenance.clone(),
        ..Dataset::default()
    };
    let mut test = train.clone();
    for (id, records) in &dataset.cells {
        let (train_cycles, _) = split_cycles(records.iter().map(|r| r.cycle)).map_err(|e| e.for_cell(id))?;
        let (a, b): (Vec<CycleRecord>, Vec<CycleRecord>) = records.iter().cloned().partition(|r| train_cycles.contains(&r.cycle));
        train.cells.insert(id.clone(), a);
        test.cells.insert(id.clone(), b);
    }
    Ok((train, test))
}

/// A network input paired with its target.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub input: Tensor,
    pub target: f64,
}

/// Stride-1 windows of `window_len` consecutive samples; the target is the
/// capacity at the last sample.
pub fn make_windows(samples: &[Sample], window_len: usize) -> Vec<Window> {
    if window_len == 0 || samples.len() < window_len {
        return Vec::new();
    }
    samples
        .windows(window_len)
        .map(|w| {
            let mut data = Vec::with_capacity(window_len * FEATURE_COUNT);
            for s in w {
                data.extend_from_slice(&s.features);
            }
            Window {
                input: Tensor::new(vec![window_len, FEATURE_COUNT], data).expect("window shape"),
                target: w[window_len - 1].target,
            }
        })
        .collect()
}

/// One regime after feature extraction, splitting, scaling and windowing.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRegime {
    /// Cell id, or `pooled` when all cells share one model.
    pub label: CellId,
    pub scaler: Scaler,
    pub window_len: usize,
    pub train: Vec<Window>,
    pub test: Vec<Window>,
    /// Unscaled test rows, one run per cell, for autoregressive evaluation.
    pub test_rows: Vec<Vec<FeatureRow>>,
    pub train_cycles: usize,
    pub test_cycles: usize,
    pub out_of_range_test_values: usize,
}

/// Prepares one model per cell (`per_c_rate`) or a single pooled model.
pub fn prepare(dataset: &Dataset, window_len: usize, per_c_rate: bool) -> Result<Vec<PreparedRegime>, TrainError> {
    if window_len == 0 {
        return Err(TrainError::InvalidConfig("window length must be >= 1"));
    }
    let mut parts = Vec::new();
    for (id, records) in &dataset.cells {
        let rows = feature_rows(records);
        let (train_cycles, test_cycles) = split_cycles(rows.iter().map(|r| r.cycle)).map_err(|e| e.for_cell(id))?;
        let (train, test): (Vec<FeatureRow>, Vec<FeatureRow>) = rows.into_iter().partition(|r| train_cycles.contains(&r.cycle));
        parts.push((id.clone(), train, test, train_cycles.len(), test_cycles.len()));
    }
    if per_c_rate {
        parts
            .into_iter()
            .map(|(id, train, test, a, b)| assemble(id, vec![train], vec![test], a, b, window_len))
            .collect()
    } else {
        let (a, b) = parts.iter().fold((0, 0), |acc, p| (acc.0 + p.3, acc.1 + p.4));
        let (train, test) = parts.into_iter().map(|p| (p.1, p.2)).unzip();
        Ok(vec![assemble(CellId::new("pooled"), train, test, a, b, window_len)?])
    }
}

fn assemble(
    label: CellId,
    train: Vec<Vec<FeatureRow>>,
    test: Vec<Vec<FeatureRow>>,
    train_cycles: usize,
    test_cycles: usize,
    window_len: usize,
) -> Result<PreparedRegime, TrainError> {
    let all_train: Vec<FeatureRow> = train.iter().flatten().cloned().collect();
    let scaler = Scaler::fit(&all_train)?;
    let windows = |runs: &[Vec<FeatureRow>]| -> (Vec<Window>, usize) {
        let mut out = Vec::new();
        let mut outside = 0;
        for run in runs {
            let samples: Vec<Sample> = run.iter().map(|r| scaler.sample(r)).collect();
            outside += count_out_of_range(&samples);
            out.extend(make_windows(&samples, window_len));
        }
        (out, outside)
    };
    let (train_windows, _) = windows(&train);
    let (test_windows, outside) = windows(&test);
    Ok(PreparedRegime {
        label,
        scaler,
        window_len,
        train: train_windows,
        test: test_windows,
        test_rows: test,
        train_cycles,
        test_cycles,
        out_of_range_test_values: outside,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::StepKind;
    use proptest::prelude::*;

    fn sample(v: f64) -> Sample {
        Sample {
            features: [v; FEATURE_COUNT],
            target: v * 10.0,
        }
    }

    #[test]
    fn minmax_examples() {
        let stats = minmax_fit(&[[2.0], [4.0], [6.0]]).unwrap();
        assert_eq!(minmax_apply(&stats, &[[2.0], [4.0], [6.0]]), vec![vec![0.0], vec![0.5], vec![1.0]]);
        assert_eq!(minmax_apply(&stats, &[[8.0]]), vec![vec![1.5]]);
        let constant = minmax_fit(&[[5.0], [5.0]]).unwrap();
        assert_eq!(minmax_apply(&constant, &[[5.0], [5.0]]), vec![vec![0.0], vec![0.0]]);
        assert_eq!(minmax_fit::<[f64; 1]>(&[]), Err(TrainError::EmptyTrainSet));
    }

    #[test]
    fn split_examples() {
        let (train, test) = split_cycles(1..=10).unwrap();
        assert_eq!(train.into_iter().collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
        assert_eq!(test.into_iter().collect::<Vec<_>>(), vec![8, 9, 10]);
        let (train, test) = split_cycles(1..=3).unwrap();
        assert_eq!((train.len(), test.len()), (2, 1));
        assert_eq!(split_cycles([4]), Err(TrainError::TooFewCycles { cycles: 1 }));
    }

    #[test]
    fn window_examples() {
        let rows: Vec<Sample> = (1..=5).map(|i| sample(i as f64)).collect();
        assert_eq!(make_windows(&rows, 1).len(), 5);
        assert_eq!(make_windows(&rows, 3).len(), 3);
        let w = make_windows(&rows[..3], 2);
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].input.row(0), &[1.0; 5]);
        assert_eq!(w[0].input.row(1), &[2.0; 5]);
        assert_eq!(w[0].target, 20.0);
        assert_eq!(w[1].input.row(0), &[2.0; 5]);
        assert_eq!(w[1].target, 30.0);
        assert!(make_windows(&rows[..2], 3).is_empty());
    }

    fn record(cycle: u32, step: StepKind, t: f64, q: f64) -> CycleRecord {
        CycleRecord {
            cell_id: CellId::from("A"),
            cycle,
            step,
            time_s: t,
            current_a: 1.0,
            voltage_v: 3.5,
            capacity_ah: q,
        }
    }

    #[test]
    fn prior_capacity_resets_per_step() {
        let recs = [
            record(0, StepKind::Charge, 0.0, 0.0),
            record(0, StepKind::Charge, 1.0, 0.1),
            record(0, StepKind::Charge, 2.0, 0.2),
            record(0, StepKind::Rest, 3.0, 0.0),
            record(0, StepKind::Discharge, 4.0, 0.0),
            record(0, StepKind::Discharge, 5.0, 0.3),
        ];
        let rows = feature_rows(&recs);
        assert_eq!(rows.len(), 5);
        let prior: Vec<f64> = rows.iter().map(|r| r.features[PRIOR_CAPACITY]).collect();
        assert_eq!(prior, vec![0.0, 0.0, 0.1, 0.0, 0.0]);
        let starts: Vec<bool> = rows.iter().map(|r| r.step_start).collect();
        assert_eq!(starts, vec![true, false, false, true, false]);
    }

    fn dataset(cycles: u32) -> Dataset {
        let mut recs = Vec::new();
        let mut t = 0.0;
        for c in 0..cycles {
            for k in 0..4 {
                recs.push(record(c, StepKind::Charge, t, k as f64 * 0.1 * (1.0 - 0.01 * c as f64)));
                t += 1.0;
            }
        }
        Dataset::from_records(recs, Vec::new()).unwrap().0
    }

    #[test]
    fn prepared_regime_is_chronological_and_scaled() {
        let ds = dataset(10);
        let regimes = prepare(&ds, 1, true).unwrap();
        assert_eq!(regimes.len(), 1);
        let r = &regimes[0];
        assert_eq!((r.train_cycles, r.test_cycles), (7, 3));
        assert_eq!(r.train.len(), 28);
        assert_eq!(r.test.len(), 12);
        for w in &r.train {
            assert!(w.input.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(r.out_of_range_test_values > 0);

        let (train, test) = split_70_30(&ds).unwrap();
        let max_train = train.records().map(|r| r.cycle).max().unwrap();
        let min_test = test.records().map(|r| r.cycle).min().unwrap();
        assert!(max_train < min_test);
    }

    #[test]
    fn pooled_mode_shares_one_scaler() {
        let mut ds = dataset(4);
        let mut other: Vec<CycleRecord> = ds.cells.values().next().unwrap().clone();
        for r in &mut other {
            r.cell_id = CellId::from("B");
            r.current_a = 2.0;
        }
        ds.cells.insert(CellId::from("B"), other);
        let pooled = prepare(&ds, 1, false).unwrap();
        assert_eq!(pooled.len(), 1);
        assert_eq!(pooled[0].label.as_str(), "pooled");
        assert_eq!(pooled[0].test_rows.len(), 2);
        assert_eq!(prepare(&ds, 1, true).unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn training_features_lie_in_unit_interval(values in prop::collection::vec(prop::array::uniform5(-1e3f64..1e3), 1..50), probe in prop::array::uniform5(-1e3f64..1e3)) {
            let stats = minmax_fit(&values).unwrap();
            for row in minmax_apply(&stats, &values) {
                prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            let scaled = minmax_apply(&stats, &[probe]);
            for (j, v) in scaled[0].iter().enumerate() {
                let inside = probe[j] >= stats.min[j] && probe[j] <= stats.max[j];
                if !inside && stats.max[j] > stats.min[j] {
                    prop_assert!(!(0.0..=1.0).contains(v));
                }
            }
        }

        #[test]
        fn split_is_chronological(n in 2usize..200) {
            let (train, test) = split_cycles(0..n as u32).unwrap();
            prop_assert!(!test.is_empty());
            prop_assert!(train.iter().max() < test.iter().min());
            prop_assert_eq!(train.len(), ((7 * n).div_ceil(10)).min(n - 1));
        }
    }
}
