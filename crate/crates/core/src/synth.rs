//! Seeded synthetic cycler.
//!
//! The dQ/dV of every generated step is a flat baseline plus a sum of
//! Gaussians, so Q(V) has a closed form (error functions) and the peak
//! parameters are known exactly. C-rate enters linearly: relative to a
//! reference rate, peak centres move by `shift_v_per_c` per C (upward while
//! charging, downward while discharging), heights scale by
//! `1 + height_scale_per_c·Δc`, widths by `1 + broadening_per_c·Δc`, and the
//! step capacity by `1 − capacity_loss_per_c·Δc`. The baseline is whatever is
//! left of that capacity after the peaks. Cycling fade multiplies the whole
//! curve by `(1 − fade_per_cycle)^cycle`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{child_seed, indexed_seed, rng_from, Rng};
use crate::segment::uniform_grid;
use crate::types::{CellId, CellSpec, Chemistry, CurveError, CycleRecord, Dataset, HalfCycleCurve, StepKind};

/// Charge / discharge C-rates of the four test regimes.
pub const PROTOCOL: [(f64, f64); 4] = [(0.2, 0.5), (0.5, 0.9), (1.0, 1.3), (1.5, 1.6)];
/// Base sampling rate of the cycler.
pub const SAMPLE_HZ: f64 = 10.0;
/// Rest between steps, seconds.
pub const REST_S: f64 = 600.0;
/// Discharge cut-off used by the test procedure.
pub const DISCHARGE_CUTOFF_V: f64 = 3.0;

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;
const SQRT_PI_OVER_2: f64 = 1.253_314_137_315_500_3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("C-rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("peak centred at {center_v} V lies outside the {lo}..{hi} V window")]
    PeakOutOfWindow { center_v: f64, lo: f64, hi: f64 },
    #[error("{what} is not positive at {c_rate} C")]
    NonPhysical { what: &'static str, c_rate: f64 },
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("protocol is empty")]
    EmptyProtocol,
    #[error(transparent)]
    Curve(#[from] CurveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakSpec {
    pub center_v: f64,
    pub height_ah_per_v: f64,
    pub sigma_v: f64,
}

impl PeakSpec {
    pub fn new(center_v: f64, height_ah_per_v: f64, sigma_v: f64) -> Result<Self, SynthError> {
        if !(height_ah_per_v > 0.0) || !(sigma_v > 0.0) || !center_v.is_finite() {
            return Err(SynthError::InvalidConfig("peak height and sigma must be positive"));
        }
        Ok(PeakSpec {
            center_v,
            height_ah_per_v,
            sigma_v,
        })
    }

    /// Peak from its full width at half maximum.
    pub fn from_fwhm(center_v: f64, height_ah_per_v: f64, fwhm_v: f64) -> Self {
        PeakSpec {
            center_v,
            height_ah_per_v,
            sigma_v: fwhm_v / FWHM_PER_SIGMA,
        }
    }

    pub fn fwhm_v(&self) -> f64 {
        FWHM_PER_SIGMA * self.sigma_v
    }

    pub fn value(&self, v: f64) -> f64 {
        let z = (v - self.center_v) / self.sigma_v;
        self.height_ah_per_v * libm::exp(-0.5 * z * z)
    }

    /// `∫_{-∞}^{v}` up to the constant `h·σ·√(π/2)`; differences give exact areas.
    fn antiderivative(&self, v: f64) -> f64 {
        self.height_ah_per_v * self.sigma_v * SQRT_PI_OVER_2 * libm::erf((v - self.center_v) / (core::f64::consts::SQRT_2 * self.sigma_v))
    }

    /// Area between `lo` and `hi`.
    pub fn area_between(&self, lo: f64, hi: f64) -> f64 {
        self.antiderivative(hi) - self.antiderivative(lo)
    }
}

/// Per-unit-C change of the curve relative to the reference rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Polarization {
    pub shift_v_per_c: f64,
    pub height_scale_per_c: f64,
    pub broadening_per_c: f64,
    pub capacity_loss_per_c: f64,
}

/// Calibration of one step direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCalibration {
    pub reference_c_rate: f64,
    /// Step capacity at the reference rate on a fresh cell.
    pub reference_capacity_ah: f64,
    /// Peaks at the reference rate.
    pub peaks: Vec<PeakSpec>,
    pub polarization: Polarization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCellConfig {
    pub spec: CellSpec,
    /// Voltage range swept by every step.
    pub window_v: (f64, f64),
    pub charge: StepCalibration,
    pub discharge: StepCalibration,
    pub fade_per_cycle: f64,
    pub noise_sigma_v: f64,
    pub noise_sigma_a: f64,
    pub sample_hz: f64,
    /// Keep one base sample in `decimation`.
    pub decimation: usize,
    pub rest_s: f64,
    /// Points of the voltage grid used by [`generate_half_cycle`].
    pub grid_points: usize,
    pub seed: u64,
}

impl SynthCellConfig {
    pub fn chemistry(&self) -> Chemistry {
        self.spec.chemistry
    }

    pub fn calibration(&self, step: StepKind) -> Option<&StepCalibration> {
        match step {
            StepKind::Charge => Some(&self.charge),
            StepKind::Discharge => Some(&self.discharge),
            StepKind::Rest => None,
        }
    }

    /// Same configuration without measurement noise.
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma_v = 0.0;
        self.noise_sigma_a = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.window_v;
        if !(lo < hi) {
            return Err(SynthError::InvalidConfig("voltage window must be increasing"));
        }
        if !(0.0..1.0).contains(&self.fade_per_cycle) {
            return Err(SynthError::InvalidConfig("fade per cycle must lie in [0, 1)"));
        }
        if !(self.noise_sigma_v >= 0.0 && self.noise_sigma_a >= 0.0) {
            return Err(SynthError::InvalidConfig("noise levels must be non-negative"));
        }
        if !(self.sample_hz > 0.0) || self.decimation == 0 || !(self.rest_s >= 0.0) {
            return Err(SynthError::InvalidConfig("sampling parameters must be positive"));
        }
        if self.grid_points < 2 {
            return Err(SynthError::InvalidConfig("grid needs at least 2 points"));
        }
        for cal in [&self.charge, &self.discharge] {
            if !(cal.reference_c_rate > 0.0 && cal.reference_capacity_ah > 0.0) {
                return Err(SynthError::InvalidConfig("reference rate and capacity must be positive"));
            }
            for p in &cal.peaks {
                PeakSpec::new(p.center_v, p.height_ah_per_v, p.sigma_v)?;
            }
        }
        Ok(())
    }

    /// The analytic curve of one step.
    pub fn step_model(&self, step: StepKind, c_rate: f64, cycle: u32) -> Result<StepModel, SynthError> {
        if !(c_rate > 0.0 && c_rate.is_finite()) {
            return Err(SynthError::NonPositiveRate(c_rate));
        }
        let cal = self
            .calibration(step)
            .ok_or(SynthError::InvalidConfig("rest steps have no curve"))?;
        let (lo, hi) = self.window_v;
        let dc = c_rate - cal.reference_c_rate;
        let pol = &cal.polarization;
        let direction = if step == StepKind::Charge { 1.0 } else { -1.0 };
        let height_factor = 1.0 + pol.height_scale_per_c * dc;
        let sigma_factor = 1.0 + pol.broadening_per_c * dc;
        let capacity_factor = 1.0 - pol.capacity_loss_per_c * dc;
        for (what, f) in [
            ("peak height", height_factor),
            ("peak width", sigma_factor),
            ("capacity", capacity_factor),
        ] {
            if !(f > 0.0) {
                return Err(SynthError::NonPhysical { what, c_rate });
            }
        }
        let fade = libm::pow(1.0 - self.fade_per_cycle, f64::from(cycle));

        let mut peaks = Vec::with_capacity(cal.peaks.len());
        for p in &cal.peaks {
            let center_v = p.center_v + direction * pol.shift_v_per_c * dc;
            if !(center_v > lo && center_v < hi) {
                return Err(SynthError::PeakOutOfWindow { center_v, lo, hi });
            }
            peaks.push(PeakSpec {
                center_v,
                height_ah_per_v: p.height_ah_per_v * height_factor * fade,
                sigma_v: p.sigma_v * sigma_factor,
            });
        }
        let capacity = cal.reference_capacity_ah * capacity_factor * fade;
        let in_peaks: f64 = peaks.iter().map(|p| p.area_between(lo, hi)).sum();
        let baseline = (capacity - in_peaks) / (hi - lo);
        if !(baseline > 0.0) {
            return Err(SynthError::NonPhysical { what: "baseline", c_rate });
        }
        Ok(StepModel {
            step,
            c_rate,
            window_v: (lo, hi),
            baseline_ah_per_v: baseline,
            peaks,
        })
    }
}

/// Closed-form dQ/dV and Q(V) of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepModel {
    pub step: StepKind,
    pub c_rate: f64,
    pub window_v: (f64, f64),
    pub baseline_ah_per_v: f64,
    pub peaks: Vec<PeakSpec>,
}

impl StepModel {
    pub fn dqdv(&self, v: f64) -> f64 {
        self.baseline_ah_per_v + self.peaks.iter().map(|p| p.value(v)).sum::<f64>()
    }

    /// Charge stored between the lower window edge and `v`.
    fn stored(&self, v: f64) -> f64 {
        let lo = self.window_v.0;
        self.baseline_ah_per_v * (v - lo) + self.peaks.iter().map(|p| p.area_between(lo, v)).sum::<f64>()
    }

    pub fn total_capacity(&self) -> f64 {
        self.stored(self.window_v.1)
    }

    /// Capacity passed since the start of the step when the cell is at `v`.
    pub fn capacity_at(&self, v: f64) -> f64 {
        match self.step {
            StepKind::Discharge => self.total_capacity() - self.stored(v),
            _ => self.stored(v),
        }
    }

    /// Inverse of [`StepModel::capacity_at`] by bisection.
    pub fn voltage_at(&self, q: f64) -> f64 {
        let (mut a, mut b) = self.window_v;
        let rising = self.step != StepKind::Discharge;
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            let below = self.capacity_at(m) < q;
            if below == rising {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    }

    pub fn start_voltage(&self) -> f64 {
        match self.step {
            StepKind::Discharge => self.window_v.1,
            _ => self.window_v.0,
        }
    }

    pub fn end_voltage(&self) -> f64 {
        match self.step {
            StepKind::Discharge => self.window_v.0,
            _ => self.window_v.1,
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn step_seed(seed: u64, cell: &CellId, cycle: u32, step: StepKind, c_rate: f64) -> u64 {
    let label = format!("{}/{}/{}", cell, step.code(), c_rate.to_bits());
    indexed_seed(child_seed(seed, "synth"), &label, u64::from(cycle))
}

/// One step on a uniform voltage grid, with its exact peaks.
///
/// Noise is voltage noise carried to capacity through the local slope,
/// `δQ = dQ/dV · δV`, so the voltage grid stays monotone.
pub fn generate_half_cycle(
    config: &SynthCellConfig,
    c_rate: f64,
    cycle: u32,
    step: StepKind,
) -> Result<(HalfCycleCurve, Vec<PeakSpec>), SynthError> {
    config.validate()?;
    let model = config.step_model(step, c_rate, cycle)?;
    let (lo, hi) = model.window_v;
    let mut voltage = uniform_grid(lo, hi, config.grid_points);
    if step == StepKind::Discharge {
        voltage.reverse();
    }
    let cell = CellId::new(config.chemistry().slug());
    let mut rng = rng_from(step_seed(config.seed, &cell, cycle, step, c_rate));
    let capacity = voltage
        .iter()
        .map(|&v| {
            let q = model.capacity_at(v);
            if config.noise_sigma_v > 0.0 {
                q + model.dqdv(v) * config.noise_sigma_v * normal(&mut rng)
            } else {
                q
            }
        })
        .collect();
    let curve = HalfCycleCurve::new(cell, cycle, step, c_rate, voltage, capacity)?;
    Ok((curve, model.peaks))
}

/// Exact description of one generated half-cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfCycleTruth {
    pub cell_id: CellId,
    pub cycle: u32,
    pub step: StepKind,
    pub c_rate: f64,
    pub capacity_ah: f64,
    pub baseline_ah_per_v: f64,
    pub peaks: Vec<PeakSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRun {
    pub dataset: Dataset,
    pub truth: Vec<HalfCycleTruth>,
}

/// Identifier of the cell running regime `index`: `A`, `B`, ...
pub fn regime_cell_id(index: usize) -> CellId {
    CellId::new(crate::peaks::peak_label(index))
}

struct Emitter<'a> {
    config: &'a SynthCellConfig,
    cell: CellId,
    time_s: f64,
    voltage_v: f64,
    rng: Rng,
    records: Vec<CycleRecord>,
}

impl Emitter<'_> {
    fn push(&mut self, cycle: u32, step: StepKind, t: f64, current: f64, voltage: f64, capacity: f64) {
        let (mut i, mut v) = (current, voltage);
        if self.config.noise_sigma_a > 0.0 {
            i += self.config.noise_sigma_a * normal(&mut self.rng);
        }
        if self.config.noise_sigma_v > 0.0 {
            v += self.config.noise_sigma_v * normal(&mut self.rng);
        }
        self.records.push(CycleRecord {
            cell_id: self.cell.clone(),
            cycle,
            step,
            time_s: t,
            current_a: i,
            voltage_v: v,
            capacity_ah: capacity,
        });
    }

    fn period(&self) -> f64 {
        self.config.decimation as f64 / self.config.sample_hz
    }

    fn rest(&mut self, cycle: u32) {
        let start = self.time_s;
        let dt = self.period();
        let n = libm::floor(self.config.rest_s / dt) as usize;
        for k in 0..n {
            let v = self.voltage_v;
            self.push(cycle, StepKind::Rest, start + k as f64 * dt, 0.0, v, 0.0);
        }
        self.time_s = start + self.config.rest_s;
    }

    fn active(&mut self, cycle: u32, model: &StepModel) {
        let start = self.time_s;
        let dt = self.period();
        let sign = if model.step == StepKind::Charge { 1.0 } else { -1.0 };
        let current = self.config.spec.current_for(model.c_rate);
        let total = model.total_capacity();
        let duration = total / current * 3600.0;
        let n = libm::floor(duration / dt) as usize;
        for k in 0..=n {
            let t = k as f64 * dt;
            if t >= duration {
                break;
            }
            let q = current * t / 3600.0;
            let v = if k == 0 { model.start_voltage() } else { model.voltage_at(q) };
            self.push(cycle, model.step, start + t, sign * current, v, q);
        }
        self.push(cycle, model.step, start + duration, sign * current, model.end_voltage(), total);
        self.voltage_v = model.end_voltage();
        self.time_s = start + duration + dt;
    }
}

/// Runs every `(charge_c, discharge_c)` regime on its own fresh cell for
/// `cycles` cycles. A cycle is rest, charge, rest, discharge, rest.
pub fn generate_protocol_run(config: &SynthCellConfig, protocol: &[(f64, f64)], cycles: u32) -> Result<SynthRun, SynthError> {
    config.validate()?;
    if protocol.is_empty() {
        return Err(SynthError::EmptyProtocol);
    }
    let mut records = Vec::new();
    let mut truth = Vec::new();
    for (r, &(charge_c, discharge_c)) in protocol.iter().enumerate() {
        let cell = regime_cell_id(r);
        let mut out = Emitter {
            config,
            cell: cell.clone(),
            time_s: 0.0,
            voltage_v: config.window_v.0,
            rng: rng_from(0),
            records: Vec::new(),
        };
        for cycle in 0..cycles {
            out.rng = rng_from(step_seed(config.seed, &cell, cycle, StepKind::Rest, 0.0));
            out.rest(cycle);
            for (step, c) in [(StepKind::Charge, charge_c), (StepKind::Discharge, discharge_c)] {
                let model = config.step_model(step, c, cycle)?;
                out.rng = rng_from(step_seed(config.seed, &cell, cycle, step, c));
                out.active(cycle, &model);
                if step == StepKind::Charge {
                    out.rest(cycle);
                }
                truth.push(HalfCycleTruth {
                    cell_id: cell.clone(),
                    cycle,
                    step,
                    c_rate: c,
                    capacity_ah: model.total_capacity(),
                    baseline_ah_per_v: model.baseline_ah_per_v,
                    peaks: model.peaks,
                });
            }
            out.rest(cycle);
        }
        records.extend(out.records);
    }
    let provenance = alloc::vec![format!(
        "synthetic {} seed={} cycles={}",
        config.chemistry().slug(),
        config.seed,
        cycles
    )];
    let (dataset, _) =
        Dataset::from_records(records, provenance).map_err(|_| SynthError::InvalidConfig("generated records collide in time"))?;
    Ok(SynthRun { dataset, truth })
}

/// Linear coefficient taking `from` at the reference rate to `to` at
/// `to_c`, relative to `from`.
fn per_c(from: f64, to: f64, span_c: f64) -> f64 {
    (to / from - 1.0) / span_c
}

fn nca() -> SynthCellConfig {
    let spec = CellSpec::hongli_a18650();
    // charge: A at 3.4 V, B near 3.6 V; B widens 150 → 275 mV over 0.2 → 1.5 C
    let charge = StepCalibration {
        reference_c_rate: 0.2,
        reference_capacity_ah: spec.nominal_capacity_ah,
        peaks: alloc::vec![
            PeakSpec::from_fwhm(3.40, 3.5, 0.060),
            PeakSpec::from_fwhm(3.60, 2.0, 0.150),
            PeakSpec::from_fwhm(3.85, 2.0, 0.095),
            PeakSpec::from_fwhm(4.05, 2.2, 0.085),
        ],
        polarization: Polarization {
            shift_v_per_c: 0.05,
            height_scale_per_c: -0.3,
            broadening_per_c: per_c(0.150, 0.275, 1.3),
            capacity_loss_per_c: 0.12,
        },
    };
    // discharge: A 3.78 → 3.35 V, 1.4 → 0.6 A/V, 120 → 400 mV over 0.5 → 1.6 C
    let discharge = StepCalibration {
        reference_c_rate: 0.5,
        reference_capacity_ah: 1.8,
        peaks: alloc::vec![PeakSpec::from_fwhm(3.78, 1.4, 0.120)],
        polarization: Polarization {
            shift_v_per_c: 0.43 / 1.1,
            height_scale_per_c: per_c(1.4, 0.6, 1.1),
            broadening_per_c: per_c(0.120, 0.400, 1.1),
            capacity_loss_per_c: 0.25,
        },
    };
    SynthCellConfig {
        window_v: (DISCHARGE_CUTOFF_V, spec.max_voltage_v),
        spec,
        charge,
        discharge,
        fade_per_cycle: 0.001,
        noise_sigma_v: 0.002,
        noise_sigma_a: 0.005,
        sample_hz: SAMPLE_HZ,
        decimation: 600,
        rest_s: REST_S,
        grid_points: 100,
        seed: 0,
    }
}

fn lifepo4() -> SynthCellConfig {
    let spec = CellSpec::a123_anr26650();
    // charge: 3.34 → 3.48 V, 25 → 50 mV over 0.2 → 1.5 C, capacity −10 %.
    // Height starts at 42 and falls faster than the 42 → 25 two-point line so
    // the decline survives smoothing of the narrow low-rate peak.
    let charge = StepCalibration {
        reference_c_rate: 0.2,
        reference_capacity_ah: spec.nominal_capacity_ah,
        peaks: alloc::vec![PeakSpec::from_fwhm(3.34, 42.0, 0.025)],
        polarization: Polarization {
            shift_v_per_c: 0.14 / 1.3,
            height_scale_per_c: -0.5,
            broadening_per_c: per_c(0.025, 0.050, 1.3),
            capacity_loss_per_c: 0.10 / 1.3,
        },
    };
    let discharge = StepCalibration {
        reference_c_rate: 0.5,
        reference_capacity_ah: 2.4,
        peaks: alloc::vec![PeakSpec::from_fwhm(3.20, 30.0, 0.030), PeakSpec::from_fwhm(3.30, 18.0, 0.030)],
        polarization: Polarization {
            shift_v_per_c: 0.08,
            height_scale_per_c: -0.35,
            broadening_per_c: 0.8,
            capacity_loss_per_c: 0.08,
        },
    };
    SynthCellConfig {
        window_v: (DISCHARGE_CUTOFF_V, spec.max_voltage_v),
        spec,
        charge,
        discharge,
        fade_per_cycle: 0.001,
        noise_sigma_v: 0.002,
        noise_sigma_a: 0.005,
        sample_hz: SAMPLE_HZ,
        decimation: 600,
        rest_s: REST_S,
        grid_points: 100,
        seed: 0,
    }
}

/// Calibrated configurations for both chemistries.
pub fn default_calibrations() -> BTreeMap<Chemistry, SynthCellConfig> {
    let mut map = BTreeMap::new();
    map.insert(Chemistry::LiNiCoAlO2, nca());
    map.insert(Chemistry::LiFePO4, lifepo4());
    map
}

pub fn default_calibration(chemistry: Chemistry) -> SynthCellConfig {
    match chemistry {
        Chemistry::LiNiCoAlO2 => nca(),
        Chemistry::LiFePO4 => lifepo4(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dca::{compute_dqdv, differential_capacity, DcaConfig};
    use crate::peaks::detect_peaks;
    use crate::segment::{resample_uniform, segment_cycles};

    fn quiet(chemistry: Chemistry) -> SynthCellConfig {
        default_calibration(chemistry).noiseless()
    }

    #[test]
    fn calibration_anchors() {
        let lfp = quiet(Chemistry::LiFePO4);
        let at = |c| lfp.step_model(StepKind::Charge, c, 0).unwrap().peaks[0];
        assert!((at(0.2).center_v - 3.34).abs() < 1e-12);
        assert!((at(1.5).center_v - 3.48).abs() < 1e-12);
        assert!((at(1.5).fwhm_v() - 0.050).abs() < 1e-12);
        let cap = |c| lfp.step_model(StepKind::Charge, c, 0).unwrap().total_capacity();
        assert!((cap(1.5) / cap(0.2) - 0.9).abs() < 1e-12);
        assert!((cap(0.2) - 2.5).abs() < 1e-12);

        let nca = quiet(Chemistry::LiNiCoAlO2);
        let a = |c| nca.step_model(StepKind::Discharge, c, 0).unwrap().peaks[0];
        assert!((a(0.5).center_v - 3.78).abs() < 1e-12);
        assert!((a(1.6).center_v - 3.35).abs() < 1e-12);
        assert!((a(1.6).height_ah_per_v - 0.6).abs() < 1e-12);
        assert!((a(1.6).fwhm_v() - 0.4).abs() < 1e-12);
        let charge = nca.step_model(StepKind::Charge, 0.2, 0).unwrap();
        assert_eq!(charge.peaks[0].center_v, 3.4);
        assert_eq!(nca.spec.nominal_capacity_ah, 2.2);
    }

    #[test]
    fn every_protocol_rate_is_physical() {
        for config in default_calibrations().values() {
            for &(c, d) in &PROTOCOL {
                assert!(config.step_model(StepKind::Charge, c, 0).is_ok());
                assert!(config.step_model(StepKind::Discharge, d, 0).is_ok());
            }
        }
    }

    #[test]
    fn fade_is_geometric() {
        let mut config = quiet(Chemistry::LiFePO4);
        config.fade_per_cycle = 0.001;
        let q0 = config.step_model(StepKind::Charge, 0.2, 0).unwrap().total_capacity();
        let q100 = config.step_model(StepKind::Charge, 0.2, 100).unwrap().total_capacity();
        assert!((q100 / q0 - libm::pow(0.999, 100.0)).abs() < 1e-12);
        assert!((q100 / q0 - 0.9048).abs() < 1e-4);
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let model = quiet(Chemistry::LiNiCoAlO2).step_model(StepKind::Charge, 1.0, 3).unwrap();
        let (lo, hi) = model.window_v;
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let simpson: f64 = (0..n)
            .map(|k| {
                let a = lo + k as f64 * h;
                h / 6.0 * (model.dqdv(a) + 4.0 * model.dqdv(a + h / 2.0) + model.dqdv(a + h))
            })
            .sum();
        assert!((simpson - model.total_capacity()).abs() < 1e-10);
        let q = 0.37 * model.total_capacity();
        assert!((model.capacity_at(model.voltage_at(q)) - q).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_rates_and_windows() {
        let config = quiet(Chemistry::LiFePO4);
        assert_eq!(
            generate_half_cycle(&config, 0.0, 0, StepKind::Charge).unwrap_err(),
            SynthError::NonPositiveRate(0.0)
        );
        let mut narrow = config.clone();
        narrow.window_v = (3.0, 3.35);
        assert!(narrow.step_model(StepKind::Charge, 0.2, 0).is_ok());
        assert!(matches!(
            narrow.step_model(StepKind::Charge, 0.5, 0),
            Err(SynthError::PeakOutOfWindow { .. })
        ));
        assert!(generate_protocol_run(&config, &[], 1).is_err());
    }

    #[test]
    fn half_cycle_recovers_reference_peak() {
        let mut config = quiet(Chemistry::LiFePO4);
        config.grid_points = 400;
        let (curve, truth) = generate_half_cycle(&config, 0.2, 0, StepKind::Charge).unwrap();
        let d = compute_dqdv(&resample_uniform(&curve, 400).unwrap()).unwrap();
        let peaks = detect_peaks(&d, 0.3).unwrap();
        assert_eq!(peaks.len(), 1);
        let step = d.step_v();
        assert!((peaks[0].position_v - truth[0].center_v).abs() <= step);
        let expected = truth[0].height_ah_per_v + config.step_model(StepKind::Charge, 0.2, 0).unwrap().baseline_ah_per_v;
        assert!((peaks[0].height_ah_per_v / expected - 1.0).abs() < 0.02);
    }

    #[test]
    fn protocol_counts_and_rates() {
        let config = quiet(Chemistry::LiNiCoAlO2);
        let run = generate_protocol_run(&config, &PROTOCOL, 10).unwrap();
        let seg = segment_cycles(&run.dataset.records().cloned().collect::<Vec<_>>(), 2.2);
        assert_eq!(seg.curves.len(), 80);
        assert_eq!(run.truth.len(), 80);
        assert_eq!(run.dataset.cells.len(), 4);
        for (r, &(c, d)) in PROTOCOL.iter().enumerate() {
            let cell = regime_cell_id(r);
            let rates: Vec<(StepKind, f64)> = seg
                .curves
                .iter()
                .filter(|k| k.cell_id == cell)
                .map(|k| (k.step, k.c_rate))
                .collect();
            assert_eq!(rates.len(), 20);
            for (step, rate) in rates {
                assert_eq!(rate, if step == StepKind::Charge { c } else { d });
            }
        }
    }

    #[test]
    fn single_cycle_round_trip() {
        let config = quiet(Chemistry::LiFePO4);
        let run = generate_protocol_run(&config, &PROTOCOL[..1], 1).unwrap();
        let records: Vec<CycleRecord> = run.dataset.records().cloned().collect();
        let seg = segment_cycles(&records, 2.5);
        assert_eq!(seg.curves.len(), 2);
        assert_eq!(seg.jitter_dropped, 0);
        let rests = records.iter().filter(|r| r.step == StepKind::Rest).count();
        assert_eq!(rests, 3 * 10);
    }

    #[test]
    fn generated_capacity_matches_integral() {
        let config = quiet(Chemistry::LiFePO4);
        let run = generate_protocol_run(&config, &PROTOCOL, 2).unwrap();
        let records: Vec<CycleRecord> = run.dataset.records().cloned().collect();
        let seg = segment_cycles(&records, 2.5);
        for (curve, truth) in seg.curves.iter().zip(&run.truth) {
            let model = config.step_model(truth.step, truth.c_rate, truth.cycle).unwrap();
            let (lo, hi) = model.window_v;
            let n = 100_000;
            let h = (hi - lo) / n as f64;
            let integral: f64 = (0..n)
                .map(|k| 0.5 * h * (model.dqdv(lo + k as f64 * h) + model.dqdv(lo + (k + 1) as f64 * h)))
                .sum();
            assert!((curve.capacity_swing() / integral - 1.0).abs() < 0.005);
        }
    }

    #[test]
    fn same_seed_same_run() {
        let config = default_calibration(Chemistry::LiNiCoAlO2);
        let a = generate_protocol_run(&config, &PROTOCOL, 2).unwrap();
        let b = generate_protocol_run(&config, &PROTOCOL, 2).unwrap();
        assert_eq!(a, b);
        let mut other = config.clone();
        other.seed = 1;
        assert_ne!(generate_protocol_run(&other, &PROTOCOL, 2).unwrap().dataset, a.dataset);
    }

    /// Truth centres behind the above-threshold maxima of the exact curve
    /// on a fine grid.
    fn resolved(model: &StepModel) -> Vec<f64> {
        let (lo, hi) = model.window_v;
        let v = uniform_grid(lo, hi, 4001);
        let y = v.iter().map(|&x| model.dqdv(x)).collect();
        let exact = crate::dca::DqDvCurve {
            cell_id: CellId::from("exact"),
            cycle: 0,
            step: model.step,
            c_rate: model.c_rate,
            voltage_v: v,
            dqdv_ah_per_v: y,
            smoothed: false,
        };
        detect_peaks(&exact, 0.3)
            .unwrap()
            .iter()
            .map(|p| {
                model
                    .peaks
                    .iter()
                    .map(|t| t.center_v)
                    .min_by(|a, b| (a - p.position_v).abs().total_cmp(&(b - p.position_v).abs()))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn noiseless_pipeline_recovers_truth() {
        for config in default_calibrations().into_values() {
            let config = config.noiseless();
            let run = generate_protocol_run(&config, &PROTOCOL, 1).unwrap();
            let records: Vec<CycleRecord> = run.dataset.records().cloned().collect();
            let seg = segment_cycles(&records, config.spec.nominal_capacity_ah);
            for (curve, truth) in seg.curves.iter().zip(&run.truth) {
                let model = config.step_model(truth.step, truth.c_rate, truth.cycle).unwrap();
                let d = differential_capacity(curve, &DcaConfig::default()).unwrap();
                let found = detect_peaks(&d, 0.3).unwrap();
                let expected = resolved(&model);
                assert!(!expected.is_empty());
                for c in expected {
                    let err = found.iter().map(|p| (p.position_v - c).abs()).fold(f64::INFINITY, f64::min);
                    assert!(
                        err <= d.step_v(),
                        "{} {} {} at {c}: {err}",
                        config.chemistry(),
                        truth.step,
                        truth.c_rate
                    );
                }
            }
        }
    }

    #[test]
    fn noiseless_trends_follow_rate() {
        for config in default_calibrations().into_values() {
            let config = config.noiseless();
            let run = generate_protocol_run(&config, &PROTOCOL, 1).unwrap();
            let records: Vec<CycleRecord> = run.dataset.records().cloned().collect();
            let seg = segment_cycles(&records, config.spec.nominal_capacity_ah);
            for step in [StepKind::Charge, StepKind::Discharge] {
                let groups: Vec<(f64, crate::dca::DqDvCurve)> = seg
                    .curves
                    .iter()
                    .filter(|c| c.step == step)
                    .map(|c| (c.c_rate, differential_capacity(c, &DcaConfig::default()).unwrap()))
                    .collect();
                let trend = crate::peaks::peak_trends(&groups, 0.3, crate::peaks::default_match_gate(step)).unwrap();
                let a = trend.series("A").unwrap();
                assert_eq!(a.points.len(), 4, "{} {step}", config.chemistry());
                for w in a.points.windows(2) {
                    if step == StepKind::Charge {
                        assert!(w[1].position_v > w[0].position_v);
                    } else {
                        assert!(w[1].position_v < w[0].position_v);
                    }
                    assert!(w[1].height_ah_per_v < w[0].height_ah_per_v, "{} {step}", config.chemistry());
                    assert!(w[1].width_v > w[0].width_v, "{} {step}", config.chemistry());
                }
            }
        }
    }
}
