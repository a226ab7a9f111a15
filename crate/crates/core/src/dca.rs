//! Differential capacity.
//!
//! ```text
//! dQ/dV ≈ (Q[k+1] − Q[k]) / (V[k+1] − V[k])
//! ```
//!
//! The forward difference is stored at the left node `V[k]`, so an n-point
//! curve yields n − 1 values. Discharge curves are flipped to ascending
//! voltage and use `|ΔQ|`, which makes their peaks positive.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::{resample_uniform, ResampleError, DEFAULT_RESAMPLE_POINTS};
use crate::types::{CellId, HalfCycleCurve, StepKind};

pub const DEFAULT_SMOOTH_WINDOW: usize = 11;
pub const DEFAULT_SMOOTH_ORDER: usize = 3;

/// Relative spacing tolerance for a grid to count as uniform.
pub const UNIFORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DcaError {
    #[error("voltage is not strictly monotone at sample {0}")]
    NonMonotoneVoltage(usize),
    #[error("voltage grid is not uniform at sample {0}")]
    NonUniformGrid(usize),
    #[error("need at least 2 points, got {0}")]
    TooShort(usize),
    #[error("smoothing window {window} with order {order}: window must be odd, >= 3 and greater than the order")]
    BadWindow { window: usize, order: usize },
    #[error(transparent)]
    Resample(#[from] ResampleError),
}

/// dQ/dV on an ascending uniform voltage grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqDvCurve {
    pub cell_id: CellId,
    pub cycle: u32,
    pub step: StepKind,
    pub c_rate: f64,
    pub voltage_v: Vec<f64>,
    pub dqdv_ah_per_v: Vec<f64>,
    pub smoothed: bool,
}

impl DqDvCurve {
    pub fn len(&self) -> usize {
        self.voltage_v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltage_v.is_empty()
    }

    /// Grid spacing (0 for a single point).
    pub fn step_v(&self) -> f64 {
        if self.voltage_v.len() < 2 {
            0.0
        } else {
            (self.voltage_v[self.voltage_v.len() - 1] - self.voltage_v[0]) / (self.voltage_v.len() - 1) as f64
        }
    }

    /// Trapezoidal integral over the whole grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.voltage_v, &self.dqdv_ah_per_v)
    }
}

pub(crate) fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (ys[0] + ys[1]) * (xs[1] - xs[0]))
        .sum()
}

fn check_uniform(v: &[f64]) -> Result<(), DcaError> {
    if v.len() < 3 {
        return Ok(());
    }
    let h = (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64;
    for (i, w) in v.windows(2).enumerate() {
        if ((w[1] - w[0]) - h).abs() > UNIFORM_TOLERANCE * h.abs() {
            return Err(DcaError::NonUniformGrid(i + 1));
        }
    }
    Ok(())
}

/// Forward-difference dQ/dV of a uniformly resampled curve.
pub fn compute_dqdv(curve: &HalfCycleCurve) -> Result<DqDvCurve, DcaError> {
    let n = curve.len();
    if n < 2 {
        return Err(DcaError::TooShort(n));
    }
    let (mut v, mut q) = (curve.voltage().to_vec(), curve.capacity().to_vec());
    if v[n - 1] < v[0] {
        v.reverse();
        q.reverse();
    }
    for (i, w) in v.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(DcaError::NonMonotoneVoltage(i + 1));
        }
    }
    check_uniform(&v)?;
    let dqdv = (0..n - 1).map(|k| (q[k + 1] - q[k]).abs() / (v[k + 1] - v[k])).collect();
    v.truncate(n - 1);
    Ok(DqDvCurve {
        cell_id: curve.cell_id.clone(),
        cycle: curve.cycle,
        step: curve.step,
        c_rate: curve.c_rate,
        voltage_v: v,
        dqdv_ah_per_v: dqdv,
        smoothed: false,
    })
}

/// Center weights of a least-squares polynomial fit of `order` over `width`
/// equally spaced points, evaluated at the middle point.
pub fn savgol_center_weights(width: usize, order: usize) -> Vec<f64> {
    let half = (width / 2) as f64;
    let scale = if half > 0.0 { half } else { 1.0 };
    let a = DMatrix::from_fn(width, order + 1, |r, c| libm::pow((r as f64 - half) / scale, c as f64));
    let ata = a.transpose() * &a;
    let chol = ata.cholesky().expect("Vandermonde normal matrix is positive definite");
    let mut e0 = DVector::zeros(order + 1);
    e0[0] = 1.0;
    // weights = e0ᵀ (AᵀA)⁻¹ Aᵀ
    let coeff = chol.solve(&e0);
    (a * coeff).iter().copied().collect()
}

/// Savitzky–Golay smoothing. Near the ends the window shrinks to stay
/// centred (down to a single point at each end) and the order is capped
/// below the window width.
pub fn smooth(curve: &DqDvCurve, window: usize, poly_order: usize) -> Result<DqDvCurve, DcaError> {
    if window < 3 || window.is_multiple_of(2) || poly_order >= window {
        return Err(DcaError::BadWindow { window, order: poly_order });
    }
    let y = &curve.dqdv_ah_per_v;
    let n = y.len();
    let mut cache: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let reach = i.min(n - 1 - i);
        let width = window.min(2 * reach + 1);
        let order = poly_order.min(width - 1);
        let weights = cache.entry((width, order)).or_insert_with(|| savgol_center_weights(width, order));
        let start = i - width / 2;
        out.push(weights.iter().zip(&y[start..start + width]).map(|(w, v)| w * v).sum());
    }
    Ok(DqDvCurve {
        dqdv_ah_per_v: out,
        smoothed: true,
        ..curve.clone()
    })
}

/// Resampling, differencing and smoothing settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcaConfig {
    pub n_points: usize,
    pub smooth: bool,
    pub window: usize,
    pub poly_order: usize,
}

impl Default for DcaConfig {
    fn default() -> Self {
        DcaConfig {
            n_points: DEFAULT_RESAMPLE_POINTS,
            smooth: true,
            window: DEFAULT_SMOOTH_WINDOW,
            poly_order: DEFAULT_SMOOTH_ORDER,
        }
    }
}

/// `resample_uniform → compute_dqdv → smooth`.
pub fn differential_capacity(curve: &HalfCycleCurve, config: &DcaConfig) -> Result<DqDvCurve, DcaError> {
    let resampled = resample_uniform(curve, config.n_points)?;
    let raw = compute_dqdv(&resampled)?;
    if config.smooth {
        smooth(&raw, config.window, config.poly_order)
    } else {
        Ok(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::uniform_grid;
    use alloc::vec;
    use proptest::prelude::*;

    fn curve(step: StepKind, v: Vec<f64>, q: Vec<f64>) -> HalfCycleCurve {
        HalfCycleCurve::new(CellId::from("T"), 0, step, 0.5, v, q).unwrap()
    }

    fn dq(values: Vec<f64>) -> DqDvCurve {
        DqDvCurve {
            cell_id: CellId::from("T"),
            cycle: 0,
            step: StepKind::Charge,
            c_rate: 0.5,
            voltage_v: uniform_grid(0.0, 1.0, values.len()),
            dqdv_ah_per_v: values,
            smoothed: false,
        }
    }

    #[test]
    fn linear_curve_is_constant() {
        let v = uniform_grid(3.0, 4.0, 101);
        let d = compute_dqdv(&curve(StepKind::Charge, v.clone(), v.clone())).unwrap();
        assert_eq!(d.len(), 100);
        assert!(d.dqdv_ah_per_v.iter().all(|&x| x == 1.0));
        let d = compute_dqdv(&curve(StepKind::Charge, v.clone(), v.iter().map(|x| 0.7 * x - 2.0).collect())).unwrap();
        assert!(d.dqdv_ah_per_v.iter().all(|x| (x - 0.7).abs() < 1e-12));
    }

    #[test]
    fn quadratic_forward_difference() {
        let v: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
        let q: Vec<f64> = v.iter().map(|x| x * x).collect();
        let d = compute_dqdv(&curve(StepKind::Charge, v.clone(), q)).unwrap();
        for (k, x) in d.dqdv_ah_per_v.iter().enumerate() {
            assert!((x - (2.0 * v[k] + 0.01)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_points() {
        let d = compute_dqdv(&curve(StepKind::Charge, vec![3.0, 3.5], vec![0.0, 0.25])).unwrap();
        assert_eq!(d.dqdv_ah_per_v, vec![0.5]);
    }

    #[test]
    fn discharge_is_flipped_and_positive() {
        let d = compute_dqdv(&curve(StepKind::Discharge, vec![4.0, 3.5, 3.0], vec![0.0, 1.0, 1.5])).unwrap();
        assert_eq!(d.voltage_v, vec![3.0, 3.5]);
        assert_eq!(d.dqdv_ah_per_v, vec![1.0, 2.0]);
    }

    #[test]
    fn non_uniform_grid_is_rejected() {
        let c = curve(StepKind::Charge, vec![3.0, 3.1, 3.4], vec![0.0, 1.0, 2.0]);
        assert_eq!(compute_dqdv(&c), Err(DcaError::NonUniformGrid(1)));
    }

    #[test]
    fn smoothing_examples() {
        let flat = dq(vec![2.5; 30]);
        for (a, b) in smooth(&flat, 11, 3).unwrap().dqdv_ah_per_v.iter().zip(&flat.dqdv_ah_per_v) {
            assert!((a - b).abs() < 1e-12);
        }
        let cubic: Vec<f64> = (0..40)
            .map(|i| {
                let x = i as f64 * 0.1 - 2.0;
                x * x * x - 0.5 * x * x + 2.0 * x + 1.0
            })
            .collect();
        for window in [5, 7, 11, 15] {
            let s = smooth(&dq(cubic.clone()), window, 3).unwrap();
            for (a, b) in s.dqdv_ah_per_v.iter().zip(&cubic) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!(s.smoothed);
        }
        let mut impulse = vec![0.0; 21];
        impulse[10] = 1.0;
        let s = smooth(&dq(impulse), 5, 2).unwrap();
        assert!((s.dqdv_ah_per_v[10] - 17.0 / 35.0).abs() < 1e-12);
        assert!((s.dqdv_ah_per_v[9] - 12.0 / 35.0).abs() < 1e-12);
        assert!((s.dqdv_ah_per_v[8] + 3.0 / 35.0).abs() < 1e-12);
    }

    #[test]
    fn bad_windows() {
        let c = dq(vec![0.0; 10]);
        assert!(smooth(&c, 4, 2).is_err());
        assert!(smooth(&c, 1, 0).is_err());
        assert!(smooth(&c, 5, 5).is_err());
    }

    #[test]
    fn integral_matches_capacity_swing() {
        let v = uniform_grid(3.0, 3.6, 100);
        let q: Vec<f64> = v
            .iter()
            .map(|x| 0.5 * (1.0 + libm::erf((x - 3.3) / (0.03 * 2f64.sqrt()))))
            .collect();
        let c = curve(StepKind::Charge, v, q);
        let d = compute_dqdv(&c).unwrap();
        let h = d.step_v();
        let (lo, hi) = d.dqdv_ah_per_v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert!((d.integral() - c.capacity_swing()).abs() <= h * (hi - lo) + 1e-12);
        let s = smooth(&d, 11, 3).unwrap();
        assert!((s.integral() - d.integral()).abs() <= 0.01 * d.integral());
    }

    proptest! {
        #[test]
        fn dqdv_is_linear(a in 0.0f64..3.0, b in 0.0f64..3.0, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::seed::rng_from(seed);
            let v = uniform_grid(3.0, 4.0, 50);
            let mut acc1 = 0.0;
            let mut acc2 = 0.0;
            let q1: Vec<f64> = v.iter().map(|_| { acc1 += rng.random_range(0.0..1.0); acc1 }).collect();
            let q2: Vec<f64> = v.iter().map(|_| { acc2 += rng.random_range(0.0..1.0); acc2 }).collect();
            let mix: Vec<f64> = q1.iter().zip(&q2).map(|(x, y)| a * x + b * y).collect();
            let run = |q: Vec<f64>| compute_dqdv(&curve(StepKind::Charge, v.clone(), q)).unwrap().dqdv_ah_per_v;
            let (d1, d2, dm) = (run(q1), run(q2), run(mix));
            for k in 0..dm.len() {
                prop_assert!((dm[k] - (a * d1[k] + b * d2[k])).abs() <= 1e-12 * dm[k].abs().max(1.0));
            }
        }
    }
}
