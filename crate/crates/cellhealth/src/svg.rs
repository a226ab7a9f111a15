//! Minimal deterministic SVG line plots.
//!
//! Output depends only on the input values: coordinates are printed with a
//! fixed number of decimals and nothing (clock, locale, hash order) leaks in.
//! Inputs are validated before any byte is written, so a failed plot never
//! leaves a partial file behind.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 48.0;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot")]
    NoSeries,
    #[error("series `{0}` has no points")]
    EmptySeries(String),
    #[error("series `{series}` point {index} is not finite")]
    NonFiniteValue { series: String, index: usize },
    #[error("series `{series}` point {index} is not positive on a log axis")]
    NonPositiveOnLogAxis { series: String, index: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.into(), points }
    }

    pub fn from_xy(name: impl Into<String>, x: &[f64], y: &[f64]) -> Self {
        Series::new(name, x.iter().copied().zip(y.iter().copied()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotStyle {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub width: u32,
    pub height: u32,
    pub log_y: bool,
    /// Draw a dot at every point.
    pub markers: bool,
}

impl Default for PlotStyle {
    fn default() -> Self {
        PlotStyle {
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            width: 640,
            height: 400,
            log_y: false,
            markers: false,
        }
    }
}

impl PlotStyle {
    pub fn titled(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        PlotStyle {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..PlotStyle::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub style: PlotStyle,
    pub series: Vec<Series>,
}

fn validate(series: &[Series], log_y: bool) -> Result<(), PlotError> {
    if series.is_empty() {
        return Err(PlotError::NoSeries);
    }
    for s in series {
        if s.points.is_empty() {
            return Err(PlotError::EmptySeries(s.name.clone()));
        }
        for (index, &(x, y)) in s.points.iter().enumerate() {
            if !(x.is_finite() && y.is_finite()) {
                return Err(PlotError::NonFiniteValue {
                    series: s.name.clone(),
                    index,
                });
            }
            if log_y && y <= 0.0 {
                return Err(PlotError::NonPositiveOnLogAxis {
                    series: s.name.clone(),
                    index,
                });
            }
        }
    }
    Ok(())
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Padded data range; a degenerate range is widened around its value.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        let pad = 0.04 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        let d = if lo == 0.0 { 0.5 } else { 0.05 * lo.abs() };
        (lo - d, hi + d)
    }
}

/// Round step (1, 2 or 5 times a power of ten) for about `target` ticks.
fn nice_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f < 1.5 {
        1.0
    } else if f < 3.5 {
        2.0
    } else if f < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn linear_ticks(lo: f64, hi: f64) -> (Vec<f64>, usize) {
    let step = nice_step(hi - lo, 5.0);
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    ((first..=last).map(|k| k as f64 * step).collect(), decimals)
}

fn tick_label(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0".to_string()
    } else {
        s
    }
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn unit(&self, v: f64) -> f64 {
        if self.log {
            (v.log10() - self.lo) / (self.hi - self.lo)
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let first = self.lo.ceil() as i32;
            let last = self.hi.floor() as i32;
            let every = ((last - first) / 6 + 1).max(1);
            (first..=last)
                .filter(|e| (e - first) % every == 0)
                .map(|e| (10f64.powi(e), format!("1e{e}")))
                .collect()
        } else {
            let (ticks, decimals) = linear_ticks(self.lo, self.hi);
            ticks.into_iter().map(|t| (t, tick_label(t, decimals))).collect()
        }
    }
}

fn render_panel(out: &mut String, panel: &Panel, ox: f64, oy: f64) {
    let style = &panel.style;
    let w = f64::from(style.width);
    let h = f64::from(style.height);
    let pw = w - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = h - MARGIN_TOP - MARGIN_BOTTOM;
    let points = || panel.series.iter().flat_map(|s| s.points.iter());
    let (x_lo, x_hi) = range(points().map(|p| p.0));
    let x_axis = Axis {
        lo: x_lo,
        hi: x_hi,
        log: false,
    };
    let y_axis = if style.log_y {
        let (lo, hi) = points().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        let (lo, hi) = (lo.log10(), hi.log10());
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Axis {
            lo: lo.floor(),
            hi: hi.ceil(),
            log: true,
        }
    } else {
        let (lo, hi) = range(points().map(|p| p.1));
        Axis { lo, hi, log: false }
    };
    let px = |x: f64| MARGIN_LEFT + x_axis.unit(x) * pw;
    let py = |y: f64| MARGIN_TOP + (1.0 - y_axis.unit(y)) * ph;

    let _ = writeln!(out, "<g transform=\"translate({ox:.0},{oy:.0})\">");
    let _ = writeln!(out, "<rect x=\"0\" y=\"0\" width=\"{w:.0}\" height=\"{h:.0}\" fill=\"white\"/>");
    if !style.title.is_empty() {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
            MARGIN_LEFT + pw / 2.0,
            escape(&style.title)
        );
    }
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN_LEFT:.2}\" y=\"{MARGIN_TOP:.2}\" width=\"{pw:.2}\" height=\"{ph:.2}\" fill=\"none\" stroke=\"black\"/>"
    );
    for (t, label) in x_axis.ticks() {
        let x = px(t);
        let _ = writeln!(
            out,
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            MARGIN_TOP + ph,
            MARGIN_TOP + ph + 5.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{}</text>",
            MARGIN_TOP + ph + 18.0,
            escape(&label)
        );
    }
    for (t, label) in y_axis.ticks() {
        let y = py(t);
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{MARGIN_LEFT:.2}\" y2=\"{y:.2}\" stroke=\"black\"/>",
            MARGIN_LEFT - 5.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{}</text>",
            MARGIN_LEFT - 8.0,
            y + 4.0,
            escape(&label)
        );
    }
    if !style.x_label.is_empty() {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
            MARGIN_LEFT + pw / 2.0,
            h - 10.0,
            escape(&style.x_label)
        );
    }
    if !style.y_label.is_empty() {
        let cy = MARGIN_TOP + ph / 2.0;
        let _ = writeln!(
            out,
            "<text x=\"16\" y=\"{cy:.2}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {cy:.2})\">{}</text>",
            escape(&style.y_label)
        );
    }
    for (i, s) in panel.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            coords.join(" ")
        );
        if style.markers {
            for &(x, y) in &s.points {
                let _ = writeln!(out, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>", px(x), py(y));
            }
        }
    }
    let lx = MARGIN_LEFT + pw - 150.0;
    for (i, s) in panel.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = MARGIN_TOP + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            lx,
            lx + 20.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>",
            lx + 26.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</g>\n");
}

/// Panels laid out on a grid with `columns` columns.
pub fn render_panels(panels: &[Panel], columns: usize) -> Result<String, PlotError> {
    if panels.is_empty() {
        return Err(PlotError::NoSeries);
    }
    for p in panels {
        validate(&p.series, p.style.log_y)?;
    }
    let columns = columns.clamp(1, panels.len());
    let rows = panels.len().div_ceil(columns);
    let cell_w = panels.iter().map(|p| p.style.width).max().unwrap_or(0);
    let cell_h = panels.iter().map(|p| p.style.height).max().unwrap_or(0);
    let total_w = cell_w as usize * columns;
    let total_h = cell_h as usize * rows;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w}\" height=\"{total_h}\" viewBox=\"0 0 {total_w} {total_h}\" font-family=\"sans-serif\">"
    );
    for (i, p) in panels.iter().enumerate() {
        let ox = f64::from(cell_w) * (i % columns) as f64;
        let oy = f64::from(cell_h) * (i / columns) as f64;
        render_panel(&mut out, p, ox, oy);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render_svg(series: &[Series], style: &PlotStyle) -> Result<String, PlotError> {
    validate(series, style.log_y)?;
    render_panels(
        &[Panel {
            style: style.clone(),
            series: series.to_vec(),
        }],
        1,
    )
}

fn write(path: &Path, text: &str) -> Result<(), PlotError> {
    fs::write(path, text).map_err(|source| PlotError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Renders and writes one plot. Nothing is written if validation fails.
pub fn emit_svg_plot(path: &Path, series: &[Series], style: &PlotStyle) -> Result<(), PlotError> {
    let text = render_svg(series, style)?;
    write(path, &text)
}

pub fn emit_svg_panels(path: &Path, panels: &[Panel], columns: usize) -> Result<(), PlotError> {
    let text = render_panels(panels, columns)?;
    write(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_points() -> Vec<Series> {
        vec![Series::new("a", vec![(0.0, 1.0), (1.0, 2.0)])]
    }

    #[test]
    fn one_series_one_polyline() {
        let svg = render_svg(&two_points(), &PlotStyle::titled("t", "x", "y")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.starts_with("<svg "));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn same_input_same_bytes() {
        let style = PlotStyle {
            markers: true,
            ..PlotStyle::titled("loss", "epoch", "mse")
        };
        assert_eq!(
            render_svg(&two_points(), &style).unwrap(),
            render_svg(&two_points(), &style).unwrap()
        );
    }

    #[test]
    fn nan_is_rejected_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.svg");
        let series = vec![Series::new("bad", vec![(0.0, 1.0), (1.0, f64::NAN)])];
        let err = emit_svg_plot(&path, &series, &PlotStyle::default()).unwrap_err();
        assert!(matches!(err, PlotError::NonFiniteValue { index: 1, .. }));
        assert!(!path.exists());
        emit_svg_plot(&path, &two_points(), &PlotStyle::default()).unwrap();
        assert!(path.exists());
    }

    #[test]
    fn log_axis_needs_positive_values() {
        let style = PlotStyle {
            log_y: true,
            ..PlotStyle::default()
        };
        let series = vec![Series::new("loss", vec![(1.0, 0.1), (2.0, 1e-4)])];
        let svg = render_svg(&series, &style).unwrap();
        assert!(svg.contains(">1e-4<") && svg.contains(">1e-1<"));
        let zero = vec![Series::new("loss", vec![(1.0, 0.0)])];
        assert!(matches!(render_svg(&zero, &style), Err(PlotError::NonPositiveOnLogAxis { .. })));
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(matches!(render_svg(&[], &PlotStyle::default()), Err(PlotError::NoSeries)));
        let empty = vec![Series::new("e", vec![])];
        assert!(matches!(render_svg(&empty, &PlotStyle::default()), Err(PlotError::EmptySeries(_))));
    }

    #[test]
    fn text_is_escaped_and_panels_tile() {
        let p = Panel {
            style: PlotStyle::titled("a<b & c", "", ""),
            series: two_points(),
        };
        let svg = render_panels(&[p.clone(), p.clone(), p], 2).unwrap();
        assert!(svg.contains("a&lt;b &amp; c"));
        assert!(svg.contains("width=\"1280\" height=\"800\""));
        assert_eq!(svg.matches("<polyline").count(), 3);
    }

    #[test]
    fn ticks_are_round_numbers() {
        let (t, d) = linear_ticks(3.0, 4.2);
        let labels: Vec<String> = t.iter().map(|&v| tick_label(v, d)).collect();
        assert_eq!(labels, ["3.0", "3.2", "3.4", "3.6", "3.8", "4.0", "4.2"]);
        assert_eq!(tick_label(-0.0, 1), "0");
    }
}
