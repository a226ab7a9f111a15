//! Peak identification on dQ/dV curves.
//!
//! Candidates are interior local maxima. Each gets a topographic prominence:
//! walk outwards on both sides until a strictly higher sample (or the end of
//! the curve), take the lowest sample on each side, and subtract the higher
//! of the two from the peak value. Peaks whose prominence reaches a fraction
//! (default 30 %) of the tallest candidate are kept and measured.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dca::DqDvCurve;
use crate::types::{CellId, StepKind};

pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.3;
pub const DEFAULT_MATCH_GATE_V: f64 = 0.15;
/// Discharge peaks move further between adjacent protocol rates.
pub const DISCHARGE_MATCH_GATE_V: f64 = 0.20;

/// Matching gate used for trends of `step`.
pub fn default_match_gate(step: StepKind) -> f64 {
    match step {
        StepKind::Discharge => DISCHARGE_MATCH_GATE_V,
        _ => DEFAULT_MATCH_GATE_V,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PeakError {
    #[error("curve has {0} points; at least 3 are needed")]
    CurveTooShort(usize),
    #[error("sample {0} is not a local maximum")]
    NotAMaximum(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub label: String,
    /// Grid index of the discrete maximum.
    pub index: usize,
    pub position_v: f64,
    pub height_ah_per_v: f64,
    pub prominence_ah_per_v: f64,
    /// Full width at half prominence.
    pub width_v: f64,
    /// Integral of the curve between the two half-prominence crossings.
    pub area_ah: f64,
    pub left_base_idx: usize,
    pub right_base_idx: usize,
    /// A half-prominence crossing was missing on at least one side and the
    /// base index was used instead.
    pub clamped: bool,
}

/// Indices `i` with `v[i−1] < v[i] >= v[i+1]`; endpoints never qualify and a
/// flat top reports its leftmost sample.
pub fn find_local_maxima(values: &[f64]) -> Result<Vec<usize>, PeakError> {
    if values.len() < 3 {
        return Err(PeakError::CurveTooShort(values.len()));
    }
    Ok((1..values.len() - 1)
        .filter(|&i| values[i] > values[i - 1] && values[i] >= values[i + 1])
        .collect())
}

fn is_maximum(values: &[f64], i: usize) -> bool {
    i > 0 && i + 1 < values.len() && values[i] > values[i - 1] && values[i] >= values[i + 1]
}

/// `(prominence, left_base, right_base)` of the maximum at `peak`.
pub fn compute_prominence(values: &[f64], peak: usize) -> Result<(f64, usize, usize), PeakError> {
    if !is_maximum(values, peak) {
        return Err(PeakError::NotAMaximum(peak));
    }
    let top = values[peak];
    let (mut left_min, mut left_base) = (top, peak);
    for j in (0..peak).rev() {
        if values[j] > top {
            break;
        }
        if values[j] < left_min {
            left_min = values[j];
            left_base = j;
        }
    }
    let (mut right_min, mut right_base) = (top, peak);
    for (j, &v) in values.iter().enumerate().skip(peak + 1) {
        if v > top {
            break;
        }
        if v < right_min {
            right_min = v;
            right_base = j;
        }
    }
    // A side that never drops below the peak still has a base next to it.
    if left_base == peak {
        left_base = peak - 1;
    }
    if right_base == peak {
        right_base = peak + 1;
    }
    Ok((top - left_min.max(right_min), left_base, right_base))
}

/// Letters `A`..`Z`, then `AA`, `AB`, ...
pub fn peak_label(mut index: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (index % 26) as u8);
        if index < 26 {
            break;
        }
        index = index / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ASCII letters")
}

/// Integral of the linear interpolant of `(x, y)` from `a` to `b` (`a <= b`).
fn integrate_linear(x: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..x.len() - 1 {
        let (x0, x1) = (x[k], x[k + 1]);
        let lo = a.max(x0);
        let hi = b.min(x1);
        if hi <= lo {
            continue;
        }
        let at = |t: f64| y[k] + (y[k + 1] - y[k]) * (t - x0) / (x1 - x0);
        total += 0.5 * (at(lo) + at(hi)) * (hi - lo);
    }
    total
}

/// Measures the maximum at `peak` given its prominence and bases.
pub fn measure_peak(curve: &DqDvCurve, peak: usize, prominence: f64, bases: (usize, usize)) -> Result<Peak, PeakError> {
    let y = &curve.dqdv_ah_per_v;
    let x = &curve.voltage_v;
    if !is_maximum(y, peak) {
        return Err(PeakError::NotAMaximum(peak));
    }
    let h = x[peak + 1] - x[peak];
    let (y0, y1, y2) = (y[peak - 1], y[peak], y[peak + 1]);
    let curvature = y0 - 2.0 * y1 + y2;
    let (offset, height) = if curvature < 0.0 {
        let d = (0.5 * (y0 - y2) / curvature).clamp(-0.5, 0.5);
        (d, y1 - 0.25 * (y0 - y2) * d)
    } else {
        (0.0, y1)
    };
    let position = x[peak] + offset * h;

    let level = (height - 0.5 * prominence).min(y1);
    let (left_base, right_base) = bases;
    let mut clamped = false;

    let mut j = peak - 1;
    while j > left_base && y[j] > level {
        j -= 1;
    }
    let left = if y[j] <= level {
        x[j] + (level - y[j]) / (y[j + 1] - y[j]) * (x[j + 1] - x[j])
    } else {
        clamped = true;
        x[j]
    };

    let mut j = peak + 1;
    while j < right_base && y[j] > level {
        j += 1;
    }
    let right = if y[j] <= level {
        if y[j - 1] > y[j] {
            x[j - 1] + (y[j - 1] - level) / (y[j - 1] - y[j]) * (x[j] - x[j - 1])
        } else {
            x[j - 1]
        }
    } else {
        clamped = true;
        x[j]
    };

    Ok(Peak {
        label: String::new(),
        index: peak,
        position_v: position,
        height_ah_per_v: height,
        prominence_ah_per_v: prominence,
        width_v: right - left,
        area_ah: integrate_linear(x, y, left, right),
        left_base_idx: left_base,
        right_base_idx: right_base,
        clamped,
    })
}

/// Keeps candidates with `prominence >= fraction × (tallest candidate)`,
/// measures them and labels them by ascending position.
pub fn filter_peaks(curve: &DqDvCurve, candidates: &[usize], fraction: f64) -> Result<Vec<Peak>, PeakError> {
    let y = &curve.dqdv_ah_per_v;
    let Some(tallest) = candidates.iter().map(|&i| y[i]).reduce(f64::max) else {
        return Ok(Vec::new());
    };
    let threshold = fraction * tallest;
    let mut kept = Vec::new();
    for &i in candidates {
        let (prominence, lb, rb) = compute_prominence(y, i)?;
        if prominence >= threshold {
            kept.push(measure_peak(curve, i, prominence, (lb, rb))?);
        }
    }
    kept.sort_by(|a, b| a.position_v.total_cmp(&b.position_v));
    for (k, p) in kept.iter_mut().enumerate() {
        p.label = peak_label(k);
    }
    Ok(kept)
}

/// `find_local_maxima → filter_peaks`.
pub fn detect_peaks(curve: &DqDvCurve, fraction: f64) -> Result<Vec<Peak>, PeakError> {
    let candidates = find_local_maxima(&curve.dqdv_ah_per_v)?;
    filter_peaks(curve, &candidates, fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub c_rate: f64,
    pub position_v: f64,
    pub height_ah_per_v: f64,
    pub area_ah: f64,
    pub width_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSeries {
    pub label: String,
    pub points: Vec<TrendPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrendEventKind {
    Appeared,
    Vanished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendEvent {
    pub label: String,
    pub c_rate: f64,
    pub kind: TrendEventKind,
}

/// Peak properties against C-rate, one series per tracked peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakTrend {
    pub cell_id: CellId,
    pub step: StepKind,
    pub series: Vec<TrendSeries>,
    pub events: Vec<TrendEvent>,
}

impl PeakTrend {
    pub fn series(&self, label: &str) -> Option<&TrendSeries> {
        self.series.iter().find(|s| s.label == label)
    }
}

fn point(c_rate: f64, p: &Peak) -> TrendPoint {
    TrendPoint {
        c_rate,
        position_v: p.position_v,
        height_ah_per_v: p.height_ah_per_v,
        area_ah: p.area_ah,
        width_v: p.width_v,
    }
}

/// Tracks peaks across C-rates. Series start from the peaks of the lowest
/// rate. At each higher rate, series and peaks are paired greedily by
/// smallest shift from the series' last position, up to `gate_v`. A series
/// with no partner is reported as vanished; a peak with no series starts a
/// new one. Groups repeating a C-rate already seen are skipped.
pub fn match_peaks(groups: &[(f64, Vec<Peak>)], gate_v: f64) -> (Vec<TrendSeries>, Vec<TrendEvent>) {
    let mut order: Vec<&(f64, Vec<Peak>)> = groups.iter().collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    order.dedup_by(|b, a| a.0 == b.0);

    let mut series: Vec<TrendSeries> = Vec::new();
    let mut last_position: Vec<f64> = Vec::new();
    let mut events = Vec::new();
    for (g, (c_rate, peaks)) in order.into_iter().enumerate() {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (s, &pos) in last_position.iter().enumerate() {
            for (p, peak) in peaks.iter().enumerate() {
                let d = (peak.position_v - pos).abs();
                if d <= gate_v {
                    pairs.push((d, s, p));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut series_used = alloc::vec![false; series.len()];
        let mut peak_used = alloc::vec![false; peaks.len()];
        for (_, s, p) in pairs {
            if series_used[s] || peak_used[p] {
                continue;
            }
            series_used[s] = true;
            peak_used[p] = true;
            series[s].points.push(point(*c_rate, &peaks[p]));
            last_position[s] = peaks[p].position_v;
        }
        for (s, used) in series_used.iter().enumerate() {
            if !used {
                events.push(TrendEvent {
                    label: series[s].label.clone(),
                    c_rate: *c_rate,
                    kind: TrendEventKind::Vanished,
                });
            }
        }
        for (p, peak) in peaks.iter().enumerate() {
            if peak_used[p] {
                continue;
            }
            let label = peak_label(series.len());
            if g > 0 {
                events.push(TrendEvent {
                    label: label.clone(),
                    c_rate: *c_rate,
                    kind: TrendEventKind::Appeared,
                });
            }
            series.push(TrendSeries {
                label,
                points: alloc::vec![point(*c_rate, peak)],
            });
            last_position.push(peak.position_v);
        }
    }
    (series, events)
}

/// Detects peaks on one curve per C-rate and tracks them.
pub fn peak_trends(groups: &[(f64, DqDvCurve)], fraction: f64, gate_v: f64) -> Result<PeakTrend, PeakError> {
    let detected = groups
        .iter()
        .map(|(c, curve)| Ok((*c, detect_peaks(curve, fraction)?)))
        .collect::<Result<Vec<_>, PeakError>>()?;
    let (series, events) = match_peaks(&detected, gate_v);
    let (cell_id, step) = groups
        .first()
        .map(|(_, c)| (c.cell_id.clone(), c.step))
        .unwrap_or((CellId::new(""), StepKind::Charge));
    Ok(PeakTrend {
        cell_id,
        step,
        series,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::uniform_grid;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn gaussian(v: f64, c: f64, h: f64, s: f64) -> f64 {
        h * libm::exp(-0.5 * ((v - c) / s) * ((v - c) / s))
    }

    fn curve_from(voltage: Vec<f64>, values: Vec<f64>) -> DqDvCurve {
        DqDvCurve {
            cell_id: CellId::from("T"),
            cycle: 0,
            step: StepKind::Charge,
            c_rate: 0.2,
            voltage_v: voltage,
            dqdv_ah_per_v: values,
            smoothed: true,
        }
    }

    fn mixture(peaks: &[(f64, f64, f64)], n: usize) -> DqDvCurve {
        let v = uniform_grid(3.0, 4.0, n);
        let y = v
            .iter()
            .map(|&x| peaks.iter().map(|&(c, h, s)| gaussian(x, c, h, s)).sum())
            .collect();
        curve_from(v, y)
    }

    #[test]
    fn local_maxima_examples() {
        assert_eq!(find_local_maxima(&[0.0, 1.0, 0.0]).unwrap(), vec![1]);
        assert!(find_local_maxima(&[0.0, 1.0, 2.0, 3.0]).unwrap().is_empty());
        assert_eq!(find_local_maxima(&[0.0, 1.0, 1.0, 0.0]).unwrap(), vec![1]);
        assert_eq!(find_local_maxima(&[0.0, 1.0]), Err(PeakError::CurveTooShort(2)));
    }

    #[test]
    fn prominence_examples() {
        let g = mixture(&[(3.5, 1.0, 0.02)], 401);
        let i = find_local_maxima(&g.dqdv_ah_per_v).unwrap()[0];
        let (p, lb, rb) = compute_prominence(&g.dqdv_ah_per_v, i).unwrap();
        assert!((p - g.dqdv_ah_per_v[i]).abs() < 1e-12);
        assert_eq!((lb, rb), (0, 400));

        let two = [0.0, 1.0, 0.5, 0.8, 0.0];
        assert!((compute_prominence(&two, 3).unwrap().0 - 0.3).abs() < 1e-15);
        assert_eq!(compute_prominence(&two, 1).unwrap().0, 1.0);

        let twins = [0.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(compute_prominence(&twins, 1).unwrap().0, 1.0);
        assert_eq!(compute_prominence(&twins, 3).unwrap().0, 1.0);
        assert_eq!(compute_prominence(&twins, 2), Err(PeakError::NotAMaximum(2)));
    }

    #[test]
    fn filter_examples() {
        let c = mixture(&[(3.3, 1.0, 0.02), (3.7, 0.25, 0.02)], 501);
        let p = detect_peaks(&c, 0.3).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0].position_v - 3.3).abs() < 1e-3);

        let c = mixture(&[(3.2, 1.0, 0.02), (3.5, 0.5, 0.02), (3.8, 0.35, 0.02)], 501);
        let p = detect_peaks(&c, 0.3).unwrap();
        let labels: Vec<&str> = p.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, vec!["A", "B", "C"]);

        let c = mixture(&[(3.6, 0.01, 0.05)], 201);
        assert_eq!(detect_peaks(&c, 0.3).unwrap().len(), 1);
        assert!(filter_peaks(&c, &[], 0.3).unwrap().is_empty());
    }

    #[test]
    fn gaussian_width_and_area() {
        let sigma = 0.02;
        let c = mixture(&[(3.5, 1.0, sigma)], 2001);
        let p = &detect_peaks(&c, 0.3).unwrap()[0];
        assert!((p.width_v - 2.354_820_045 * sigma).abs() < 0.02 * 2.3548 * sigma);
        let full = sigma * libm::sqrt(2.0 * core::f64::consts::PI);
        assert!((p.area_ah / full - 0.760_968_5).abs() < 0.005);
        // brute force: trapezoid on a much finer grid between the same crossings
        let lo = p.position_v - p.width_v / 2.0;
        let n = 200_000;
        let h = p.width_v / n as f64;
        let brute: f64 = (0..n)
            .map(|k| {
                let a = lo + k as f64 * h;
                0.5 * (gaussian(a, 3.5, 1.0, sigma) + gaussian(a + h, 3.5, 1.0, sigma)) * h
            })
            .sum();
        assert!((p.area_ah - brute).abs() / brute < 1e-3);
        assert!(!p.clamped);
        assert!(p.left_base_idx < p.index && p.index < p.right_base_idx);
    }

    #[test]
    fn symmetric_triangle_apex_is_exact() {
        let v = uniform_grid(0.0, 1.0, 11);
        let y = vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 2.0, 1.0, 0.0, 0.0, 0.0];
        let c = curve_from(v.clone(), y);
        let p = &detect_peaks(&c, 0.3).unwrap()[0];
        assert_eq!(p.position_v, v[5]);
        assert_eq!(p.height_ah_per_v, 3.0);
        assert!((p.width_v - 0.3).abs() < 1e-12);
    }

    #[test]
    fn labels() {
        assert_eq!(peak_label(0), "A");
        assert_eq!(peak_label(25), "Z");
        assert_eq!(peak_label(26), "AA");
        assert_eq!(peak_label(27), "AB");
    }

    fn shifted(peaks: &[(f64, f64, f64)], by: f64) -> DqDvCurve {
        let moved: Vec<(f64, f64, f64)> = peaks.iter().map(|&(c, h, s)| (c + by, h, s)).collect();
        let mut c = mixture(&moved, 1001);
        c.c_rate = 0.5;
        c
    }

    #[test]
    fn trend_examples() {
        let base = [(3.4, 1.0, 0.02), (3.7, 0.6, 0.02)];
        let a = mixture(&base, 1001);
        let t = peak_trends(&[(0.2, a.clone()), (0.5, a.clone())], 0.3, DEFAULT_MATCH_GATE_V).unwrap();
        assert_eq!(t.series.len(), 2);
        for s in &t.series {
            assert_eq!(s.points.len(), 2);
            assert_eq!(s.points[0].position_v, s.points[1].position_v);
        }
        assert!(t.events.is_empty());

        let t = peak_trends(&[(0.2, a.clone()), (0.5, shifted(&base, 0.05))], 0.3, DEFAULT_MATCH_GATE_V).unwrap();
        for s in &t.series {
            assert!((s.points[1].position_v - s.points[0].position_v - 0.05).abs() < 1e-3);
        }

        let suppressed = mixture(&[(3.4, 1.0, 0.02), (3.7, 0.1, 0.02)], 1001);
        let t = peak_trends(&[(0.2, a), (1.0, suppressed)], 0.3, DEFAULT_MATCH_GATE_V).unwrap();
        let b = t.series("B").unwrap();
        assert_eq!(b.points.len(), 1);
        assert_eq!(
            t.events,
            vec![TrendEvent {
                label: "B".into(),
                c_rate: 1.0,
                kind: TrendEventKind::Vanished
            }]
        );
    }

    fn brute_force_kept(y: &[f64], fraction: f64) -> Vec<usize> {
        let cands: Vec<usize> = (1..y.len() - 1).filter(|&i| y[i] > y[i - 1] && y[i] >= y[i + 1]).collect();
        let tallest = cands.iter().map(|&i| y[i]).fold(f64::NEG_INFINITY, f64::max);
        cands
            .into_iter()
            .filter(|&i| {
                // prominence by exhaustive search over every interval containing i
                let mut best = f64::NEG_INFINITY;
                for l in 0..=i {
                    for r in i..y.len() {
                        if y[l..=r].iter().all(|&v| v <= y[i]) {
                            let lm = y[l..=i].iter().copied().fold(f64::INFINITY, f64::min);
                            let rm = y[i..=r].iter().copied().fold(f64::INFINITY, f64::min);
                            best = best.max(y[i] - lm.max(rm));
                        }
                    }
                }
                best >= fraction * tallest
            })
            .collect()
    }

    proptest! {
        #[test]
        fn filter_equals_brute_force(y in prop::collection::vec(0.0f64..1.0, 3..40)) {
            let c = curve_from(uniform_grid(3.0, 4.0, y.len()), y.clone());
            let mut got: Vec<usize> = detect_peaks(&c, 0.3).unwrap().iter().map(|p| p.index).collect();
            got.sort_unstable();
            prop_assert_eq!(got, brute_force_kept(&y, 0.3));
        }

        #[test]
        fn scale_equivariance(s in 0.1f64..10.0, c1 in 3.2f64..3.4, c2 in 3.6f64..3.8, h2 in 0.2f64..1.0) {
            let base = mixture(&[(c1, 1.0, 0.02), (c2, h2, 0.03)], 301);
            let mut scaled = base.clone();
            scaled.dqdv_ah_per_v.iter_mut().for_each(|v| *v *= s);
            let a = detect_peaks(&base, 0.3).unwrap();
            let b = detect_peaks(&scaled, 0.3).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (p, q) in a.iter().zip(&b) {
                prop_assert_eq!(p.index, q.index);
                prop_assert!((q.height_ah_per_v - s * p.height_ah_per_v).abs() <= 1e-9 * s);
                prop_assert!((q.prominence_ah_per_v - s * p.prominence_ah_per_v).abs() <= 1e-9 * s);
                prop_assert!((q.area_ah - s * p.area_ah).abs() <= 1e-9 * s);
                prop_assert!((q.position_v - p.position_v).abs() <= 1e-9);
                prop_assert!((q.width_v - p.width_v).abs() <= 1e-9);
            }
        }

        #[test]
        fn shift_equivariance(delta in -0.5f64..0.5, c1 in 3.2f64..3.4, h2 in 0.2f64..1.0) {
            let base = mixture(&[(c1, 1.0, 0.02), (3.7, h2, 0.03)], 301);
            let mut moved = base.clone();
            moved.voltage_v.iter_mut().for_each(|v| *v += delta);
            let a = detect_peaks(&base, 0.3).unwrap();
            let b = detect_peaks(&moved, 0.3).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((q.position_v - p.position_v - delta).abs() <= 1e-9);
                prop_assert!((q.height_ah_per_v - p.height_ah_per_v).abs() <= 1e-12);
                prop_assert!((q.width_v - p.width_v).abs() <= 1e-9);
                prop_assert!((q.area_ah - p.area_ah).abs() <= 1e-9);
            }
        }

        #[test]
        fn peak_invariants(y in prop::collection::vec(0.0f64..1.0, 3..60)) {
            let c = curve_from(uniform_grid(3.0, 4.0, y.len()), y);
            for p in detect_peaks(&c, 0.3).unwrap() {
                prop_assert!(p.prominence_ah_per_v <= p.height_ah_per_v + 1e-12);
                prop_assert!(p.left_base_idx < p.index && p.index < p.right_base_idx);
                prop_assert!(p.width_v >= 0.0 && p.area_ah >= 0.0);
            }
        }
    }
}
