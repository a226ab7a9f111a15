//! Extended Kalman filter.
//!
//! Prediction:
//!
//! ```text
//! x⁻ = f(x, u)            F = ∂f/∂x at (x, u)
//! P⁻ = F P Fᵀ + Q
//! ```
//!
//! Update, with the observation Jacobian taken at the predicted state:
//!
//! ```text
//! H = ∂h/∂x at x⁻
//! K = P⁻ Hᵀ (H P⁻ Hᵀ + R)⁻¹
//! y = z − h(x⁻)
//! x = x⁻ + K y
//! P = (I − K H) P⁻,  then P ← (P + Pᵀ)/2
//! ```
//!
//! [`denoise_signal`] specializes the filter to a scalar random walk
//! (`f(x) = x`, `h(x) = x`), which is what the current and voltage channels
//! are passed through before training.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::segment::step_groups;
use crate::types::CycleRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EkfError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("{0} covariance is not symmetric")]
    NotSymmetric(&'static str),
    #[error("process noise covariance is not positive semi-definite")]
    ProcessNoiseNotPsd,
    #[error("measurement noise covariance is not positive definite")]
    MeasurementNoiseNotPd,
    #[error("innovation covariance H P Hᵀ + R is singular")]
    SingularInnovation,
    #[error("cannot filter an empty signal")]
    EmptySignal,
    #[error("invalid noise parameters q={q}, r={r} (need q >= 0, r > 0)")]
    InvalidNoise { q: f64, r: f64 },
}

/// Transition and observation functions with their Jacobians.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn measurement_dim(&self) -> usize;
    fn control_dim(&self) -> usize {
        0
    }
    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn transition_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;
    fn observation_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// `x' = F x + B u`, `z = H x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub f: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl LinearDynamics {
    /// Linear system without a control input.
    pub fn autonomous(f: DMatrix<f64>, h: DMatrix<f64>) -> Self {
        let n = f.nrows();
        LinearDynamics {
            f,
            b: DMatrix::zeros(n, 0),
            h,
        }
    }
}

impl Dynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }
    fn measurement_dim(&self) -> usize {
        self.h.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.f * x + &self.b * u
    }
    fn transition_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.f.clone()
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x
    }
    fn observation_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.h.clone()
    }
}

/// Identity transition and observation of dimension `n`.
///
/// The denoiser ignores its control input; `control_dim` lets callers pass
/// the voltage channel anyway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomWalk {
    pub dim: usize,
    pub control_dim: usize,
}

impl RandomWalk {
    pub fn scalar() -> Self {
        RandomWalk { dim: 1, control_dim: 0 }
    }
}

impl Dynamics for RandomWalk {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn measurement_dim(&self) -> usize {
        self.dim
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn transition(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn transition_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn observation_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }
}

/// Dynamics plus noise covariances.
#[derive(Debug, Clone)]
pub struct EkfModel<D> {
    dynamics: D,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

fn check_square(m: &DMatrix<f64>, n: usize, what: &'static str) -> Result<(), EkfError> {
    if m.nrows() != n {
        return Err(EkfError::DimensionMismatch {
            what,
            expected: n,
            got: m.nrows(),
        });
    }
    if m.ncols() != n {
        return Err(EkfError::DimensionMismatch {
            what,
            expected: n,
            got: m.ncols(),
        });
    }
    Ok(())
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = 1.0 + m.amax();
    (m - m.transpose()).amax() <= 1e-12 * scale
}

impl<D: Dynamics> EkfModel<D> {
    /// Validates that `q` is symmetric PSD and `r` symmetric PD with
    /// dimensions matching the dynamics.
    pub fn new(dynamics: D, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, EkfError> {
        check_square(&q, dynamics.state_dim(), "process noise")?;
        check_square(&r, dynamics.measurement_dim(), "measurement noise")?;
        if !is_symmetric(&q) {
            return Err(EkfError::NotSymmetric("process noise"));
        }
        if !is_symmetric(&r) {
            return Err(EkfError::NotSymmetric("measurement noise"));
        }
        if q.nrows() > 0 {
            let min_eig = q.clone().symmetric_eigenvalues().min();
            if min_eig < -1e-12 * (1.0 + q.amax()) {
                return Err(EkfError::ProcessNoiseNotPsd);
            }
        }
        if r.clone().cholesky().is_none() {
            return Err(EkfError::MeasurementNoiseNotPd);
        }
        Ok(EkfModel { dynamics, q, r })
    }

    pub fn dynamics(&self) -> &D {
        &self.dynamics
    }

    pub fn process_noise(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn measurement_noise(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// State estimate and its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
}

impl EkfState {
    pub fn new(x_hat: DVector<f64>, p: DMatrix<f64>) -> Result<Self, EkfError> {
        check_square(&p, x_hat.len(), "state covariance")?;
        Ok(EkfState { x_hat, p })
    }

    pub fn scalar(x: f64, p: f64) -> Self {
        EkfState {
            x_hat: DVector::from_element(1, x),
            p: DMatrix::from_element(1, 1, p),
        }
    }
}

fn check_state<D: Dynamics>(state: &EkfState, model: &EkfModel<D>) -> Result<(), EkfError> {
    let n = model.dynamics.state_dim();
    if state.x_hat.len() != n {
        return Err(EkfError::DimensionMismatch {
            what: "state",
            expected: n,
            got: state.x_hat.len(),
        });
    }
    check_square(&state.p, n, "state covariance")
}

fn check_len(v: usize, expected: usize, what: &'static str) -> Result<(), EkfError> {
    if v == expected {
        Ok(())
    } else {
        Err(EkfError::DimensionMismatch { what, expected, got: v })
    }
}

/// Propagates the estimate through `f` and the covariance through `F`.
pub fn ekf_predict<D: Dynamics>(state: &EkfState, model: &EkfModel<D>, control: &DVector<f64>) -> Result<EkfState, EkfError> {
    check_state(state, model)?;
    let n = model.dynamics.state_dim();
    check_len(control.len(), model.dynamics.control_dim(), "control")?;
    let x_pred = model.dynamics.transition(&state.x_hat, control);
    check_len(x_pred.len(), n, "transition output")?;
    let f = model.dynamics.transition_jacobian(&state.x_hat, control);
    check_square(&f, n, "transition jacobian")?;
    let p_pred = &f * &state.p * f.transpose() + &model.q;
    Ok(EkfState { x_hat: x_pred, p: p_pred })
}

/// Folds measurement `z` into a predicted state. Returns the posterior and
/// the innovation `z − h(x⁻)`.
pub fn ekf_update<D: Dynamics>(state: &EkfState, model: &EkfModel<D>, z: &DVector<f64>) -> Result<(EkfState, DVector<f64>), EkfError> {
    check_state(state, model)?;
    let n = model.dynamics.state_dim();
    let m = model.dynamics.measurement_dim();
    check_len(z.len(), m, "measurement")?;
    let h = model.dynamics.observation_jacobian(&state.x_hat);
    if h.nrows() != m || h.ncols() != n {
        return Err(EkfError::DimensionMismatch {
            what: "observation jacobian",
            expected: m * n,
            got: h.nrows() * h.ncols(),
        });
    }
    let predicted_z = model.dynamics.observe(&state.x_hat);
    check_len(predicted_z.len(), m, "observation output")?;

    let ht = h.transpose();
    let s = &h * &state.p * &ht + &model.r;
    let s_inv = s.try_inverse().ok_or(EkfError::SingularInnovation)?;
    if !s_inv.iter().all(|v| v.is_finite()) {
        return Err(EkfError::SingularInnovation);
    }
    let k = &state.p * &ht * s_inv;
    let residual = z - predicted_z;
    let x_post = &state.x_hat + &k * &residual;
    let p_post = (DMatrix::identity(n, n) - &k * &h) * &state.p;
    let p_sym = (&p_post + p_post.transpose()) * 0.5;
    Ok((EkfState { x_hat: x_post, p: p_sym }, residual))
}

/// Noise levels for the scalar denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub q: f64,
    pub r: f64,
}

impl NoiseParams {
    /// Data-driven defaults: `r` is half the sample variance of the first
    /// difference, `q = r / 100`. A constant signal gets a tiny positive `r`.
    pub fn from_signal(samples: &[f64]) -> Self {
        let diffs: Vec<f64> = samples.windows(2).map(|w| w[1] - w[0]).collect();
        let r = if diffs.len() >= 2 {
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (diffs.len() - 1) as f64;
            var / 2.0
        } else {
            0.0
        };
        let scale = samples.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
        let r = r.max(1e-12 * (1.0 + scale * scale));
        NoiseParams { q: r / 100.0, r }
    }
}

/// Scalar random-walk EKF over `samples`.
///
/// The first estimate is the first measurement with `P₀ = r`; every later
/// sample runs one predict and one update.
pub fn denoise_signal(samples: &[f64], q: f64, r: f64) -> Result<Vec<f64>, EkfError> {
    if samples.is_empty() {
        return Err(EkfError::EmptySignal);
    }
    if !(q >= 0.0 && q.is_finite() && r > 0.0 && r.is_finite()) {
        return Err(EkfError::InvalidNoise { q, r });
    }
    let model = EkfModel::new(RandomWalk::scalar(), DMatrix::from_element(1, 1, q), DMatrix::from_element(1, 1, r))?;
    denoise_with_initial(samples, &model, EkfState::scalar(samples[0], r))
}

/// Same as [`denoise_signal`] with [`NoiseParams::from_signal`].
pub fn denoise_default(samples: &[f64]) -> Result<Vec<f64>, EkfError> {
    let p = NoiseParams::from_signal(samples);
    denoise_signal(samples, p.q, p.r)
}

/// Denoises current and voltage of every contiguous step independently.
/// Capacity, time and labels are left untouched.
pub fn denoise_records(records: &[CycleRecord]) -> Result<Vec<CycleRecord>, EkfError> {
    let mut out = Vec::with_capacity(records.len());
    for group in step_groups(records) {
        let current: Vec<f64> = group.iter().map(|r| r.current_a).collect();
        let voltage: Vec<f64> = group.iter().map(|r| r.voltage_v).collect();
        let current = denoise_default(&current)?;
        let voltage = denoise_default(&voltage)?;
        for ((r, i), v) in group.iter().zip(current).zip(voltage) {
            out.push(CycleRecord {
                current_a: i,
                voltage_v: v,
                ..r.clone()
            });
        }
    }
    Ok(out)
}

fn denoise_with_initial(samples: &[f64], model: &EkfModel<RandomWalk>, init: EkfState) -> Result<Vec<f64>, EkfError> {
    let no_control = DVector::zeros(0);
    let mut out = Vec::with_capacity(samples.len());
    let mut state = init;
    out.push(state.x_hat[0]);
    let mut z = DVector::zeros(1);
    for &s in &samples[1..] {
        let predicted = ekf_predict(&state, model, &no_control)?;
        z[0] = s;
        state = ekf_update(&predicted, model, &z)?.0;
        out.push(state.x_hat[0]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    struct Doubling;

    impl Dynamics for Doubling {
        fn state_dim(&self) -> usize {
            1
        }
        fn measurement_dim(&self) -> usize {
            1
        }
        fn transition(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
            x * 2.0
        }
        fn transition_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 2.0)
        }
        fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
            x.clone()
        }
        fn observation_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 1.0)
        }
    }

    fn scalar_model(q: f64, r: f64) -> EkfModel<RandomWalk> {
        EkfModel::new(RandomWalk::scalar(), DMatrix::from_element(1, 1, q), DMatrix::from_element(1, 1, r)).unwrap()
    }

    fn none() -> DVector<f64> {
        DVector::zeros(0)
    }

    #[test]
    fn predict_identity_without_noise() {
        let s = ekf_predict(&EkfState::scalar(1.0, 2.0), &scalar_model(0.0, 1.0), &none()).unwrap();
        assert_eq!(s, EkfState::scalar(1.0, 2.0));
    }

    #[test]
    fn predict_adds_process_noise() {
        let s = ekf_predict(&EkfState::scalar(0.0, 1.0), &scalar_model(0.5, 1.0), &none()).unwrap();
        assert_eq!(s.p[(0, 0)], 1.5);
    }

    #[test]
    fn predict_scales_by_jacobian() {
        let model = EkfModel::new(Doubling, DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let s = ekf_predict(&EkfState::scalar(1.0, 1.0), &model, &none()).unwrap();
        assert_eq!(s.x_hat[0], 2.0);
        assert_eq!(s.p[(0, 0)], 4.0);
    }

    #[test]
    fn scalar_update_by_hand() {
        let (s, y) = ekf_update(&EkfState::scalar(0.0, 1.0), &scalar_model(0.0, 1.0), &DVector::from_element(1, 2.0)).unwrap();
        assert_eq!(y[0], 2.0);
        assert_eq!(s.x_hat[0], 1.0);
        assert_eq!(s.p[(0, 0)], 0.5);
    }

    #[test]
    fn huge_measurement_noise_ignores_measurement() {
        let (s, _) = ekf_update(
            &EkfState::scalar(0.0, 1.0),
            &scalar_model(0.0, 1e12),
            &DVector::from_element(1, 2.0),
        )
        .unwrap();
        assert!(s.x_hat[0].abs() < 1e-9);
    }

    #[test]
    fn zero_innovation_still_shrinks_covariance() {
        let (s, y) = ekf_update(&EkfState::scalar(3.0, 1.0), &scalar_model(0.0, 1.0), &DVector::from_element(1, 3.0)).unwrap();
        assert_eq!(y[0], 0.0);
        assert_eq!(s.x_hat[0], 3.0);
        assert!(s.p[(0, 0)] < 1.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = scalar_model(0.0, 1.0);
        let state = EkfState::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            ekf_predict(&state, &model, &none()),
            Err(EkfError::DimensionMismatch { .. })
        ));
        let ok = EkfState::scalar(0.0, 1.0);
        assert!(matches!(
            ekf_update(&ok, &model, &DVector::zeros(3)),
            Err(EkfError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            ekf_predict(&ok, &model, &DVector::zeros(1)),
            Err(EkfError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn model_validation() {
        let lin = || LinearDynamics::autonomous(DMatrix::identity(2, 2), DMatrix::identity(1, 2));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert_eq!(
            EkfModel::new(lin(), asym, DMatrix::identity(1, 1)).unwrap_err(),
            EkfError::NotSymmetric("process noise")
        );
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(
            EkfModel::new(lin(), indefinite, DMatrix::identity(1, 1)).unwrap_err(),
            EkfError::ProcessNoiseNotPsd
        );
        assert_eq!(
            EkfModel::new(lin(), DMatrix::zeros(2, 2), DMatrix::zeros(1, 1)).unwrap_err(),
            EkfError::MeasurementNoiseNotPd
        );
    }

    #[test]
    fn singular_innovation() {
        // H P Hᵀ + R = -1 + 1 = 0
        let model = scalar_model(0.0, 1.0);
        let state = EkfState::scalar(0.0, -1.0);
        assert_eq!(
            ekf_update(&state, &model, &DVector::from_element(1, 1.0)).unwrap_err(),
            EkfError::SingularInnovation
        );
    }

    #[test]
    fn denoise_constant() {
        let out = denoise_signal(&[5.0, 5.0, 5.0, 5.0], 0.3, 2.0).unwrap();
        assert!((out[3] - 5.0).abs() < 1e-6);
        assert_eq!(denoise_default(&[5.0; 4]).unwrap(), vec![5.0; 4]);
    }

    #[test]
    fn denoise_single_sample() {
        assert_eq!(denoise_signal(&[7.0], 0.0, 1.0).unwrap(), vec![7.0]);
    }

    #[test]
    fn denoise_matches_hand_recursion() {
        // x0 = 0 and P0 = r = 1
        let out = denoise_signal(&[0.0, 2.0], 0.0, 1.0).unwrap();
        assert_eq!(out, vec![0.0, 1.0]);
    }

    #[test]
    fn denoise_validates_parameters() {
        assert_eq!(denoise_signal(&[], 0.0, 1.0), Err(EkfError::EmptySignal));
        assert!(matches!(denoise_signal(&[1.0], -1.0, 1.0), Err(EkfError::InvalidNoise { .. })));
        assert!(matches!(denoise_signal(&[1.0], 0.0, 0.0), Err(EkfError::InvalidNoise { .. })));
    }

    #[test]
    fn default_noise_params() {
        let p = NoiseParams::from_signal(&[0.0, 1.0, 0.0, 1.0, 0.0]);
        // diffs 1,-1,1,-1: mean 0, sample variance 4/3
        assert!((p.r - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.q - p.r / 100.0).abs() < 1e-18);
    }

    fn random_psd(entries: &[f64], n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_row_slice(n, n, &entries[..n * n]);
        &a * a.transpose()
    }

    fn variance(v: &[f64]) -> f64 {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64
    }

    proptest! {
        #[test]
        fn constant_estimate_settles_without_process_noise(c in -5.0f64..5.0, sigma in 0.01f64..1.0, seed in 0u64..10_000) {
            use rand::Rng;
            let mut rng = crate::seed::rng_from(seed);
            let samples: Vec<f64> = (0..500)
                .map(|_| {
                    let (u1, u2): (f64, f64) = (rng.random_range(f64::EPSILON..1.0), rng.random());
                    c + sigma * libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
                })
                .collect();
            let filtered = denoise_signal(&samples, 0.0, sigma * sigma).unwrap();
            prop_assert!(variance(&filtered[450..]) < variance(&samples));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn covariance_stays_symmetric_psd(
            q in prop::collection::vec(-1.0f64..1.0, 4),
            r in prop::collection::vec(-1.0f64..1.0, 4),
            f in prop::collection::vec(-1.5f64..1.5, 4),
            zs in prop::collection::vec(-10.0f64..10.0, 1..20),
        ) {
            let dyn_ = LinearDynamics::autonomous(DMatrix::from_row_slice(2, 2, &f), DMatrix::identity(2, 2));
            let r = random_psd(&r, 2) + DMatrix::identity(2, 2) * 1e-3;
            let model = EkfModel::new(dyn_, random_psd(&q, 2), r).unwrap();
            let mut state = EkfState::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
            for z in zs {
                state = ekf_predict(&state, &model, &DVector::zeros(0)).unwrap();
                state = ekf_update(&state, &model, &DVector::from_vec(vec![z, -z])).unwrap().0;
                prop_assert_eq!(state.p.clone(), state.p.transpose());
                let min_eig = state.p.clone().symmetric_eigenvalues().min();
                prop_assert!(min_eig >= -1e-9 * (1.0 + state.p.amax()));
            }
        }
    }
}
