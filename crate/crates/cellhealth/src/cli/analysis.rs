//! `dca`, `peaks` and `report`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cellhealth_core::dca::{differential_capacity, DqDvCurve};
use cellhealth_core::peaks::{detect_peaks, peak_trends, Peak, PeakTrend, TrendEvent, TrendPoint, TrendSeries};
use cellhealth_core::segment::segment_cycles;
use cellhealth_core::StepKind;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::data::load;
use super::{CliError, Ctx};
use crate::svg::{Panel, PlotStyle, Series};

fn curve_id(c: &DqDvCurve) -> String {
    format!("{}_{}_{}", c.cell_id, c.cycle, c.step)
}

fn rate_name(c_rate: f64) -> String {
    format!("{c_rate}C")
}

#[derive(Serialize)]
struct Failure {
    cell_id: String,
    cycle: u32,
    step: StepKind,
    error: String,
}

#[derive(Serialize)]
struct DcaReport {
    curves: usize,
    empty_steps: usize,
    jitter_dropped: usize,
    failed: Vec<Failure>,
}

pub(crate) fn dca(ctx: &mut Ctx, inputs: &[PathBuf]) -> Result<(), CliError> {
    let (dataset, _, _) = load(ctx, inputs)?;
    let spec = ctx.config.cell_spec()?;
    let cfg = ctx.config.dca;
    let mut curves = Vec::new();
    let mut report = DcaReport {
        curves: 0,
        empty_steps: 0,
        jitter_dropped: 0,
        failed: Vec::new(),
    };
    ctx.stage("differentiate", |_| {
        for recs in dataset.cells.values() {
            let seg = segment_cycles(recs, spec.nominal_capacity_ah);
            report.empty_steps += seg.empty_steps.len();
            report.jitter_dropped += seg.jitter_dropped;
            for hc in &seg.curves {
                match differential_capacity(hc, &cfg) {
                    Ok(c) => curves.push(c),
                    Err(e) => {
                        log::warn!("{} cycle {} {}: {e}", hc.cell_id, hc.cycle, hc.step);
                        report.failed.push(Failure {
                            cell_id: hc.cell_id.as_str().to_string(),
                            cycle: hc.cycle,
                            step: hc.step,
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    })?;
    if curves.is_empty() {
        return Err(CliError::runtime("no half-cycle produced a dQ/dV curve", None));
    }
    report.curves = curves.len();
    ctx.json("dca/curves.json", &curves)?;
    for c in &curves {
        let mut s = String::from("voltage_v,dqdv_ah_per_v\n");
        for (v, q) in c.voltage_v.iter().zip(&c.dqdv_ah_per_v) {
            let _ = writeln!(s, "{v},{q}");
        }
        ctx.write(&format!("dca/curves/{}.csv", curve_id(c)), s)?;
    }
    for step in [StepKind::Charge, StepKind::Discharge] {
        let of_step: Vec<&DqDvCurve> = curves.iter().filter(|c| c.step == step).collect();
        if of_step.is_empty() {
            continue;
        }
        let mut by_cell: BTreeMap<&str, Vec<&DqDvCurve>> = BTreeMap::new();
        for c in &of_step {
            by_cell.entry(c.cell_id.as_str()).or_default().push(c);
        }
        let firsts: Vec<Series> = by_cell
            .iter()
            .filter_map(|(cell, cs)| {
                let c = cs.iter().min_by_key(|c| c.cycle)?;
                Some(Series::from_xy(
                    format!("{} ({cell})", rate_name(c.c_rate)),
                    &c.voltage_v,
                    &c.dqdv_ah_per_v,
                ))
            })
            .collect();
        let style = PlotStyle::titled(format!("{step} dQ/dV by C-rate"), "voltage (V)", "dQ/dV (Ah/V)");
        ctx.svg(&format!("dca/overlay_{step}.svg"), &firsts, &style)?;
        for cs in by_cell.values() {
            let rate = rate_name(cs[0].c_rate);
            let series: Vec<Series> = cs
                .iter()
                .map(|c| Series::from_xy(format!("cycle {}", c.cycle), &c.voltage_v, &c.dqdv_ah_per_v))
                .collect();
            let style = PlotStyle::titled(format!("{step} dQ/dV at {rate} ({})", cs[0].cell_id), "voltage (V)", "dQ/dV (Ah/V)");
            ctx.svg(&format!("dca/overlay_{step}_{rate}.svg"), &series, &style)?;
        }
    }
    ctx.json("dca/dca_report.json", &report)
}

fn read_json<T: DeserializeOwned>(ctx: &mut Ctx, path: &Path) -> Result<T, CliError> {
    ctx.input(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::runtime(e.to_string(), Some(path)))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("cannot parse: {e}"), Some(path)))
}

#[derive(Serialize)]
struct CurvePeaks<'a> {
    cell_id: &'a str,
    cycle: u32,
    step: StepKind,
    c_rate: f64,
    smoothed: bool,
    peaks: Vec<Peak>,
}

const TREND_PANELS: [(&str, &str); 4] = [
    ("position", "position (V)"),
    ("height", "height (Ah/V)"),
    ("area", "area (Ah)"),
    ("width", "FWHM (V)"),
];

fn property(p: &TrendPoint, index: usize) -> f64 {
    match index {
        0 => p.position_v,
        1 => p.height_ah_per_v,
        2 => p.area_ah,
        _ => p.width_v,
    }
}

fn trend_panels(title: &str, series: &[&TrendSeries]) -> Vec<Panel> {
    TREND_PANELS
        .iter()
        .enumerate()
        .map(|(i, (name, axis))| Panel {
            style: PlotStyle {
                markers: true,
                ..PlotStyle::titled(format!("{title} {name}"), "C-rate", *axis)
            },
            series: series
                .iter()
                .map(|s| {
                    Series::new(
                        format!("peak {}", s.label),
                        s.points.iter().map(|p| (p.c_rate, property(p, i))).collect(),
                    )
                })
                .collect(),
        })
        .collect()
}

fn trend_csv(series: &TrendSeries) -> String {
    let mut s = String::from("c_rate,position_v,height_ah_per_v,area_ah,width_v\n");
    for p in &series.points {
        let _ = writeln!(s, "{},{},{},{},{}", p.c_rate, p.position_v, p.height_ah_per_v, p.area_ah, p.width_v);
    }
    s
}

pub(crate) fn peaks(ctx: &mut Ctx, input: Option<&Path>) -> Result<(), CliError> {
    let path = input.map_or_else(|| ctx.out.join("dca").join("curves.json"), Path::to_path_buf);
    let curves: Vec<DqDvCurve> = read_json(ctx, &path)?;
    if curves.is_empty() {
        return Err(CliError::validation("no curves in input", Some(&path)));
    }
    let threshold = ctx.config.peaks.threshold;
    for c in &curves {
        let found = detect_peaks(c, threshold).map_err(|e| CliError::runtime(format!("{}: {e}", curve_id(c)), Some(&path)))?;
        let record = CurvePeaks {
            cell_id: c.cell_id.as_str(),
            cycle: c.cycle,
            step: c.step,
            c_rate: c.c_rate,
            smoothed: c.smoothed,
            peaks: found,
        };
        ctx.json(&format!("peaks/curves/{}.json", curve_id(c)), &record)?;
    }
    let mut trends = Vec::new();
    for step in [StepKind::Charge, StepKind::Discharge] {
        let mut chosen: BTreeMap<&str, &DqDvCurve> = BTreeMap::new();
        for c in curves.iter().filter(|c| c.step == step) {
            let keep = match ctx.config.peaks.cycle {
                Some(cycle) => c.cycle == cycle,
                None => chosen.get(c.cell_id.as_str()).is_none_or(|prev| c.cycle < prev.cycle),
            };
            if keep {
                chosen.insert(c.cell_id.as_str(), c);
            }
        }
        if chosen.is_empty() {
            continue;
        }
        let mut groups: Vec<(f64, DqDvCurve)> = chosen.values().map(|c| (c.c_rate, (*c).clone())).collect();
        groups.sort_by(|a, b| a.0.total_cmp(&b.0));
        let trend = peak_trends(&groups, threshold, ctx.config.peaks.gate(step))
            .map_err(|e| CliError::runtime(format!("{step} trends: {e}"), Some(&path)))?;
        for s in &trend.series {
            ctx.write(&format!("peaks/trend_{step}_{}.csv", s.label), trend_csv(s))?;
        }
        let refs: Vec<&TrendSeries> = trend.series.iter().filter(|s| !s.points.is_empty()).collect();
        if !refs.is_empty() {
            ctx.panels(&format!("peaks/trend_{step}.svg"), &trend_panels(&step.to_string(), &refs), 2)?;
        }
        trends.push(trend);
    }
    ctx.json("peaks/trends.json", &trends)
}

#[derive(Serialize)]
struct SeriesSummary {
    step: StepKind,
    label: String,
    points: usize,
    c_rate_min: f64,
    c_rate_max: f64,
    /// Last minus first point, in C-rate order.
    position_shift_v: f64,
    height_change_ah_per_v: f64,
    area_change_ah: f64,
    width_change_v: f64,
}

#[derive(Serialize)]
struct Summary {
    series: Vec<SeriesSummary>,
    events: Vec<(StepKind, TrendEvent)>,
}

pub(crate) fn report(ctx: &mut Ctx, input: Option<&Path>) -> Result<(), CliError> {
    let path = input.map_or_else(|| ctx.out.join("peaks").join("trends.json"), Path::to_path_buf);
    let trends: Vec<PeakTrend> = read_json(ctx, &path)?;
    let mut summary = Summary {
        series: Vec::new(),
        events: Vec::new(),
    };
    for t in &trends {
        for s in &t.series {
            let (Some(first), Some(last)) = (s.points.first(), s.points.last()) else {
                continue;
            };
            let name = format!("{}_{}", t.step, s.label);
            ctx.write(&format!("report/{name}.csv"), trend_csv(s))?;
            let title = format!("{} peak {}", t.step, s.label);
            ctx.panels(&format!("report/{name}.svg"), &trend_panels(&title, &[s]), 2)?;
            summary.series.push(SeriesSummary {
                step: t.step,
                label: s.label.clone(),
                points: s.points.len(),
                c_rate_min: first.c_rate,
                c_rate_max: last.c_rate,
                position_shift_v: last.position_v - first.position_v,
                height_change_ah_per_v: last.height_ah_per_v - first.height_ah_per_v,
                area_change_ah: last.area_ah - first.area_ah,
                width_change_v: last.width_v - first.width_v,
            });
        }
        summary.events.extend(t.events.iter().map(|e| (t.step, e.clone())));
    }
    ctx.json("report/summary.json", &summary)
}
