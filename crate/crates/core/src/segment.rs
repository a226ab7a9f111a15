//! Cycle segmentation and uniform voltage resampling.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CellId, CurveError, CycleRecord, HalfCycleCurve, StepKind};

/// Number of voltage points a half-cycle is resampled to before dQ/dV.
pub const DEFAULT_RESAMPLE_POINTS: usize = 100;

/// A charge or discharge step that had fewer than two usable samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmptyStep {
    pub cell_id: CellId,
    pub cycle: u32,
    pub step: StepKind,
    /// Samples left after the monotone filter.
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segmentation {
    pub curves: Vec<HalfCycleCurve>,
    pub empty_steps: Vec<EmptyStep>,
    /// Samples removed because they broke voltage monotonicity.
    pub jitter_dropped: usize,
}

/// Splits time-ordered records into one curve per contiguous charge or
/// discharge step.
///
/// Within a step, a sample is kept only if its voltage is strictly beyond
/// the running extremum (above the running maximum while charging, below the
/// running minimum while discharging). The C-rate of a curve is the mean
/// absolute current over `nominal_capacity_ah`, rounded to 0.01 C.
pub fn segment_cycles(records: &[CycleRecord], nominal_capacity_ah: f64) -> Segmentation {
    let mut out = Segmentation::default();
    for group in step_groups(records) {
        let head = &group[0];
        if !head.step.is_active() {
            continue;
        }
        let ascending = head.step == StepKind::Charge;
        let mut voltage = Vec::with_capacity(group.len());
        let mut capacity = Vec::with_capacity(group.len());
        for r in group {
            let keep = match voltage.last() {
                None => true,
                Some(&last) => {
                    if ascending {
                        r.voltage_v > last
                    } else {
                        r.voltage_v < last
                    }
                }
            };
            if keep {
                voltage.push(r.voltage_v);
                capacity.push(r.capacity_ah);
            } else {
                out.jitter_dropped += 1;
            }
        }
        if voltage.len() < 2 {
            out.empty_steps.push(EmptyStep {
                cell_id: head.cell_id.clone(),
                cycle: head.cycle,
                step: head.step,
                samples: voltage.len(),
            });
            continue;
        }
        let mean_current = group.iter().map(|r| r.current_a.abs()).sum::<f64>() / group.len() as f64;
        let c_rate = round_c_rate(mean_current / nominal_capacity_ah);
        let curve = HalfCycleCurve::new(head.cell_id.clone(), head.cycle, head.step, c_rate, voltage, capacity)
            .expect("monotone filter guarantees a valid curve");
        out.curves.push(curve);
    }
    out
}

/// Rounds a C-rate to two decimals.
pub fn round_c_rate(c: f64) -> f64 {
    libm::round(c * 100.0) / 100.0
}

/// Contiguous runs of records sharing cell, cycle and step.
pub fn step_groups(records: &[CycleRecord]) -> impl Iterator<Item = &[CycleRecord]> {
    records.chunk_by(|a, b| a.cell_id == b.cell_id && a.cycle == b.cycle && a.step == b.step)
}

/// Rebuilds `capacity_ah` from current by trapezoidal integration of
/// `|current|` over time, restarting at zero with every step.
pub fn reconstruct_capacity(records: &mut [CycleRecord]) {
    for group in records.chunk_by_mut(|a, b| a.cell_id == b.cell_id && a.cycle == b.cycle && a.step == b.step) {
        let mut acc = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for r in group.iter_mut() {
            let i = r.current_a.abs();
            if let Some((t0, i0)) = prev {
                acc += 0.5 * (i0 + i) * (r.time_s - t0) / 3600.0;
            }
            r.capacity_ah = if r.step.is_active() { acc } else { 0.0 };
            prev = Some((r.time_s, i));
        }
    }
}

/// Turns curves back into records (one second per sample, constant current
/// at the curve's C-rate). Used to check that segmentation is idempotent.
pub fn flatten_curves(curves: &[HalfCycleCurve], nominal_capacity_ah: f64) -> Vec<CycleRecord> {
    let mut out = Vec::new();
    let mut t = 0.0;
    for c in curves {
        let sign = if c.step == StepKind::Charge { 1.0 } else { -1.0 };
        for (&v, &q) in c.voltage().iter().zip(c.capacity()) {
            out.push(CycleRecord {
                cell_id: c.cell_id.clone(),
                cycle: c.cycle,
                step: c.step,
                time_s: t,
                current_a: sign * c.c_rate * nominal_capacity_ah,
                voltage_v: v,
                capacity_ah: q,
            });
            t += 1.0;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResampleError {
    #[error("curve spans zero voltage")]
    DegenerateSpan,
    #[error("need at least 2 resample points, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Curve(#[from] CurveError),
}

/// Resamples a curve onto `n_points` uniformly spaced voltages between its
/// lowest and highest voltage, interpolating capacity linearly. The curve
/// keeps its orientation and both endpoints are reproduced exactly.
pub fn resample_uniform(curve: &HalfCycleCurve, n_points: usize) -> Result<HalfCycleCurve, ResampleError> {
    if n_points < 2 {
        return Err(ResampleError::TooFewPoints(n_points));
    }
    let (v_min, v_max) = curve.voltage_span();
    if !(v_max > v_min) {
        return Err(ResampleError::DegenerateSpan);
    }
    let descending = curve.step == StepKind::Discharge;
    let (mut xs, mut ys): (Vec<f64>, Vec<f64>) = (curve.voltage().to_vec(), curve.capacity().to_vec());
    if descending {
        xs.reverse();
        ys.reverse();
    }

    let grid = uniform_grid(v_min, v_max, n_points);
    let mut q = Vec::with_capacity(n_points);
    let mut j = 0;
    for &x in &grid {
        while j + 2 < xs.len() && xs[j + 1] <= x {
            j += 1;
        }
        q.push(if x == xs[j] {
            ys[j]
        } else if x == xs[j + 1] {
            ys[j + 1]
        } else {
            let t = (x - xs[j]) / (xs[j + 1] - xs[j]);
            ys[j] + t * (ys[j + 1] - ys[j])
        });
    }

    let (mut grid, mut q) = (grid, q);
    if descending {
        grid.reverse();
        q.reverse();
    }
    Ok(HalfCycleCurve::new(
        curve.cell_id.clone(),
        curve.cycle,
        curve.step,
        curve.c_rate,
        grid,
        q,
    )?)
}

/// `n` evenly spaced values from `lo` to `hi`, both included exactly.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = hi - lo;
    let last = (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + span * (i as f64) / last })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn rec(cycle: u32, step: StepKind, t: f64, v: f64, q: f64) -> CycleRecord {
        let current = match step {
            StepKind::Charge => 1.1,
            StepKind::Discharge => -1.1,
            StepKind::Rest => 0.0,
        };
        CycleRecord {
            cell_id: CellId::from("A"),
            cycle,
            step,
            time_s: t,
            current_a: current,
            voltage_v: v,
            capacity_ah: q,
        }
    }

    fn one_cycle() -> Vec<CycleRecord> {
        let mut out = Vec::new();
        let mut t = 0.0;
        for _ in 0..3 {
            out.push(rec(0, StepKind::Rest, t, 3.0, 0.0));
            t += 1.0;
        }
        for i in 0..10 {
            out.push(rec(0, StepKind::Charge, t, 3.0 + 0.1 * i as f64, 0.1 * i as f64));
            t += 1.0;
        }
        out.push(rec(0, StepKind::Rest, t, 3.9, 0.0));
        t += 1.0;
        for i in 0..10 {
            out.push(rec(0, StepKind::Discharge, t, 3.9 - 0.1 * i as f64, 0.1 * i as f64));
            t += 1.0;
        }
        out
    }

    #[test]
    fn one_cycle_gives_two_curves() {
        let seg = segment_cycles(&one_cycle(), 2.2);
        assert_eq!(seg.curves.len(), 2);
        assert_eq!(seg.curves[0].step, StepKind::Charge);
        assert_eq!(seg.curves[1].step, StepKind::Discharge);
        assert_eq!(seg.curves[0].len(), 10);
        assert_eq!(seg.curves[0].c_rate, 0.5);
        assert!(seg.empty_steps.is_empty());
    }

    #[test]
    fn voltage_dip_is_dropped() {
        let mut records = one_cycle();
        // sample 5 of the charge step dips 1 mV below its predecessor
        records[3 + 5].voltage_v = records[3 + 4].voltage_v - 0.001;
        let seg = segment_cycles(&records, 2.2);
        let charge = &seg.curves[0];
        assert_eq!(charge.len(), 9);
        assert_eq!(seg.jitter_dropped, 1);
        assert!(charge.voltage().windows(2).all(|w| w[1] > w[0]));
        assert!(!charge.capacity().contains(&0.5));
    }

    #[test]
    fn rest_only_yields_nothing() {
        let records: Vec<_> = (0..5).map(|i| rec(0, StepKind::Rest, i as f64, 3.3, 0.0)).collect();
        let seg = segment_cycles(&records, 2.2);
        assert!(seg.curves.is_empty());
        assert!(seg.empty_steps.is_empty());
    }

    #[test]
    fn single_sample_step_is_reported() {
        let mut records = one_cycle();
        records.truncate(3 + 1);
        let seg = segment_cycles(&records, 2.2);
        assert!(seg.curves.is_empty());
        assert_eq!(seg.empty_steps.len(), 1);
        assert_eq!(seg.empty_steps[0].samples, 1);
    }

    #[test]
    fn segmentation_is_idempotent() {
        let seg = segment_cycles(&one_cycle(), 2.2);
        let again = segment_cycles(&flatten_curves(&seg.curves, 2.2), 2.2);
        assert_eq!(seg.curves, again.curves);
    }

    #[test]
    fn capacity_reconstruction_integrates_current() {
        let mut records = one_cycle();
        for r in records.iter_mut() {
            r.capacity_ah = -1.0;
        }
        reconstruct_capacity(&mut records);
        // 1.1 A for 9 s in the charge step
        let charge: Vec<_> = records.iter().filter(|r| r.step == StepKind::Charge).collect();
        assert_eq!(charge[0].capacity_ah, 0.0);
        assert!((charge[9].capacity_ah - 1.1 * 9.0 / 3600.0).abs() < 1e-15);
        assert!(records.iter().filter(|r| r.step == StepKind::Rest).all(|r| r.capacity_ah == 0.0));
    }

    fn curve(step: StepKind, v: Vec<f64>, q: Vec<f64>) -> HalfCycleCurve {
        HalfCycleCurve::new(CellId::from("A"), 0, step, 1.0, v, q).unwrap()
    }

    #[test]
    fn resample_linear_data() {
        let c = curve(StepKind::Charge, vec![3.0, 3.2, 3.4], vec![0.0, 1.0, 2.0]);
        let r = resample_uniform(&c, 5).unwrap();
        let expect_v = [3.0, 3.1, 3.2, 3.3, 3.4];
        let expect_q = [0.0, 0.5, 1.0, 1.5, 2.0];
        for i in 0..5 {
            assert!((r.voltage()[i] - expect_v[i]).abs() < 1e-12);
            assert!((r.capacity()[i] - expect_q[i]).abs() < 1e-12);
        }
        assert_eq!(r.voltage()[0], 3.0);
        assert_eq!(r.voltage()[4], 3.4);
        assert_eq!(r.capacity()[4], 2.0);
    }

    #[test]
    fn resample_uniform_identity() {
        let c = curve(StepKind::Charge, vec![3.0, 3.25, 3.5, 3.75], vec![0.0, 0.3, 0.9, 1.0]);
        assert_eq!(resample_uniform(&c, 4).unwrap(), c);
    }

    #[test]
    fn resample_nonuniform_segment() {
        let c = curve(StepKind::Charge, vec![3.0, 3.1, 3.4], vec![0.0, 1.0, 2.0]);
        let r = resample_uniform(&c, 3).unwrap();
        assert!((r.voltage()[1] - 3.2).abs() < 1e-12);
        assert!((r.capacity()[1] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn resample_discharge_keeps_orientation() {
        let c = curve(StepKind::Discharge, vec![4.0, 3.5, 3.0], vec![0.0, 1.0, 2.0]);
        let r = resample_uniform(&c, 5).unwrap();
        assert_eq!(r.voltage()[0], 4.0);
        assert_eq!(r.voltage()[4], 3.0);
        assert!((r.capacity()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resample_errors() {
        let c = curve(StepKind::Charge, vec![3.0, 3.1], vec![0.0, 1.0]);
        assert_eq!(resample_uniform(&c, 1), Err(ResampleError::TooFewPoints(1)));
    }

    fn arb_curve() -> impl Strategy<Value = HalfCycleCurve> {
        (
            prop::collection::vec((1e-4f64..0.1, 0.0f64..0.5), 2..60),
            2.6f64..3.5,
            any::<bool>(),
        )
            .prop_map(|(steps, v0, charge)| {
                let mut v = Vec::new();
                let mut q = Vec::new();
                let (mut vv, mut qq) = (v0, 0.0);
                for (dv, dq) in steps {
                    v.push(vv);
                    q.push(qq);
                    vv += if charge { dv } else { -dv };
                    qq += dq;
                }
                let step = if charge { StepKind::Charge } else { StepKind::Discharge };
                curve(step, v, q)
            })
    }

    proptest! {
        #[test]
        fn resample_preserves_swing(c in arb_curve(), n in 2usize..300) {
            let r = resample_uniform(&c, n).unwrap();
            prop_assert_eq!(r.len(), n);
            prop_assert_eq!(r.capacity_swing(), c.capacity_swing());
        }

        #[test]
        fn resample_is_idempotent(c in arb_curve(), n in 2usize..300) {
            let once = resample_uniform(&c, n).unwrap();
            let twice = resample_uniform(&once, n).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
