//! Canonical cycler CSV: parsing, time standardization, merging and export.
//!
//! The schema is header driven, so column order does not matter and extra
//! columns are ignored:
//!
//! ```text
//! cell_id,cycle,step,time,current_a,voltage_v,capacity_ah
//! ```
//!
//! `capacity_ah` may be omitted; capacity is then rebuilt from current by
//! trapezoidal integration, restarting at zero with every step.
//!
//! `step` is one of `CHG`, `DCH`, `REST`. `time` is either plain seconds or a
//! timestamp (`2024-03-01T10:00:00`, `2024-03-01 10:00:00.5`, RFC 3339 with an
//! offset, or a bare time of day `10:00:00`). Numbers always use `.` as the
//! decimal separator.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use cellhealth_core::segment::reconstruct_capacity;
use cellhealth_core::types::{MergeError, MergeStats};
use cellhealth_core::{CellId, CellSpec, CycleRecord, Dataset, StepKind};
use chrono::{DateTime, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER: [&str; 7] = ["cell_id", "cycle", "step", "time", "current_a", "voltage_v", "capacity_ah"];

/// Extra columns written by the denoiser.
pub const RAW_COLUMNS: [&str; 2] = ["current_a_raw", "voltage_v_raw"];

/// Slack around the cell's rated voltage range before a row is rejected.
/// Measurement noise on a sample taken at the cutoff lands slightly outside.
pub const VOLTAGE_TOLERANCE_V: f64 = 0.05;

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: &'static str },
    #[error("{path}:{line}: unparseable timestamp `{value}`")]
    UnparseableTimestamp { path: String, line: u64, value: String },
    #[error("{path}: cell {cell} mixes relative seconds, dates and times of day")]
    MixedTimeFormats { path: String, cell: CellId },
    #[error(transparent)]
    Merge(#[from] MergeError),
}

impl IngestError {
    /// File the error refers to, if any.
    pub fn path(&self) -> Option<&str> {
        match self {
            IngestError::Io { path, .. }
            | IngestError::Csv { path, .. }
            | IngestError::MissingColumn { path, .. }
            | IngestError::UnparseableTimestamp { path, .. }
            | IngestError::MixedTimeFormats { path, .. } => Some(path),
            IngestError::Merge(_) => None,
        }
    }
}

/// A time cell as written in the file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeValue {
    Seconds(f64),
    DateTime(NaiveDateTime),
    TimeOfDay(NaiveTime),
}

impl TimeValue {
    pub fn parse(s: &str) -> Option<Self> {
        if let Ok(x) = s.parse::<f64>() {
            return x.is_finite().then_some(TimeValue::Seconds(x));
        }
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Some(TimeValue::DateTime(dt.naive_utc()));
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Some(TimeValue::DateTime(dt));
            }
        }
        NaiveTime::parse_from_str(s, "%H:%M:%S%.f").ok().map(TimeValue::TimeOfDay)
    }

    fn kind(&self) -> u8 {
        match self {
            TimeValue::Seconds(_) => 0,
            TimeValue::DateTime(_) => 1,
            TimeValue::TimeOfDay(_) => 2,
        }
    }
}

/// One data row before time standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub cell_id: CellId,
    pub cycle: u32,
    pub step: StepKind,
    pub time: TimeValue,
    pub current_a: f64,
    pub voltage_v: f64,
    pub capacity_ah: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowIssueKind {
    Malformed(String),
    VoltageOutOfWindow(f64),
}

/// A skipped row. `line` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowIssue {
    pub line: u64,
    pub kind: RowIssueKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub source: String,
    pub data_rows: usize,
    pub accepted: usize,
    pub malformed: usize,
    pub voltage_out_of_window: usize,
    /// The file had no capacity column.
    pub capacity_reconstructed: bool,
    pub issues: Vec<RowIssue>,
}

impl ParseReport {
    fn skip(&mut self, line: u64, kind: RowIssueKind) {
        match kind {
            RowIssueKind::Malformed(_) => self.malformed += 1,
            RowIssueKind::VoltageOutOfWindow(_) => self.voltage_out_of_window += 1,
        }
        self.issues.push(RowIssue { line, kind });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub records: Vec<CycleRecord>,
    pub report: ParseReport,
}

/// Accepted voltage range for `spec`.
pub fn voltage_window(spec: &CellSpec) -> (f64, f64) {
    (spec.min_voltage_v - VOLTAGE_TOLERANCE_V, spec.max_voltage_v + VOLTAGE_TOLERANCE_V)
}

struct Columns {
    required: [usize; 6],
    capacity: Option<usize>,
}

impl Columns {
    fn locate(headers: &csv::StringRecord, path: &str) -> Result<Self, IngestError> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let mut required = [0; 6];
        for (slot, name) in required.iter_mut().zip(&HEADER[..6]) {
            *slot = find(name).ok_or(IngestError::MissingColumn {
                path: path.to_string(),
                column: name,
            })?;
        }
        Ok(Columns {
            required,
            capacity: find(HEADER[6]),
        })
    }
}

fn field<'a>(row: &'a csv::StringRecord, i: usize, name: &str) -> Result<&'a str, String> {
    match row.get(i).map(str::trim) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(format!("missing {name}")),
    }
}

fn number(row: &csv::StringRecord, i: usize, name: &str) -> Result<f64, String> {
    let s = field(row, i, name)?;
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("bad {name} `{s}`")),
    }
}

enum RowError {
    Skip(RowIssueKind),
    Fatal(IngestError),
}

fn parse_row(row: &csv::StringRecord, cols: &Columns, window: (f64, f64), path: &str, line: u64) -> Result<RawRecord, RowError> {
    let malformed = |m: String| RowError::Skip(RowIssueKind::Malformed(m));
    let [c_cell, c_cycle, c_step, c_time, c_current, c_voltage] = cols.required;
    let cell_id = CellId::new(field(row, c_cell, "cell_id").map_err(malformed)?);
    let cycle_s = field(row, c_cycle, "cycle").map_err(malformed)?;
    let cycle = cycle_s.parse::<u32>().map_err(|_| malformed(format!("bad cycle `{cycle_s}`")))?;
    let step_s = field(row, c_step, "step").map_err(malformed)?;
    let step = StepKind::from_code(step_s).ok_or_else(|| malformed(format!("bad step `{step_s}`")))?;
    let current_a = number(row, c_current, "current_a").map_err(malformed)?;
    let voltage_v = number(row, c_voltage, "voltage_v").map_err(malformed)?;
    let capacity_ah = match cols.capacity {
        Some(c) => number(row, c, "capacity_ah").map_err(malformed)?,
        None => 0.0,
    };
    let time_s = field(row, c_time, "time").map_err(malformed)?;
    let time = TimeValue::parse(time_s).ok_or_else(|| {
        RowError::Fatal(IngestError::UnparseableTimestamp {
            path: path.to_string(),
            line,
            value: time_s.to_string(),
        })
    })?;
    if !(window.0..=window.1).contains(&voltage_v) {
        return Err(RowError::Skip(RowIssueKind::VoltageOutOfWindow(voltage_v)));
    }
    Ok(RawRecord {
        cell_id,
        cycle,
        step,
        time,
        current_a,
        voltage_v,
        capacity_ah,
    })
}

/// Reads rows without touching time. Bad rows are skipped and reported.
pub fn read_raw<R: Read>(reader: R, source: &str, spec: &CellSpec) -> Result<(Vec<RawRecord>, ParseReport), IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::Csv {
            path: source.to_string(),
            source: e,
        })?
        .clone();
    let cols = Columns::locate(&headers, source)?;
    let window = voltage_window(spec);
    let mut report = ParseReport {
        source: source.to_string(),
        capacity_reconstructed: cols.capacity.is_none(),
        ..ParseReport::default()
    };
    let mut out = Vec::new();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if e.is_io_error() => {
                return Err(IngestError::Csv {
                    path: source.to_string(),
                    source: e,
                })
            }
            Err(e) => {
                report.data_rows += 1;
                report.skip(line, RowIssueKind::Malformed(e.to_string()));
                continue;
            }
        }
        let line = row.position().map_or(line, |p| p.line());
        report.data_rows += 1;
        match parse_row(&row, &cols, window, source, line) {
            Ok(r) => {
                report.accepted += 1;
                out.push(r);
            }
            Err(RowError::Skip(kind)) => report.skip(line, kind),
            Err(RowError::Fatal(e)) => return Err(e),
        }
    }
    Ok((out, report))
}

/// Converts every time to seconds since the earliest sample of its cell.
///
/// Relative seconds are shifted so the cell starts at 0. Dates are
/// differenced exactly. Bare times of day are unwrapped in file order: a time
/// earlier than its predecessor means the clock passed midnight.
pub fn standardize_time(raw: Vec<RawRecord>, source: &str) -> Result<Vec<CycleRecord>, IngestError> {
    use std::collections::BTreeMap;

    let mut by_cell: BTreeMap<&CellId, Vec<usize>> = BTreeMap::new();
    for (i, r) in raw.iter().enumerate() {
        by_cell.entry(&r.cell_id).or_default().push(i);
    }
    let mut seconds = vec![0.0; raw.len()];
    for (cell, rows) in &by_cell {
        let kind = raw[rows[0]].time.kind();
        if rows.iter().any(|&i| raw[i].time.kind() != kind) {
            return Err(IngestError::MixedTimeFormats {
                path: source.to_string(),
                cell: (*cell).clone(),
            });
        }
        match raw[rows[0]].time {
            TimeValue::Seconds(_) => {
                for &i in rows {
                    if let TimeValue::Seconds(x) = raw[i].time {
                        seconds[i] = x;
                    }
                }
            }
            TimeValue::DateTime(_) => {
                let first = rows
                    .iter()
                    .filter_map(|&i| match raw[i].time {
                        TimeValue::DateTime(t) => Some(t),
                        _ => None,
                    })
                    .min()
                    .expect("cell has rows");
                for &i in rows {
                    if let TimeValue::DateTime(t) = raw[i].time {
                        seconds[i] = elapsed(first, t);
                    }
                }
            }
            TimeValue::TimeOfDay(_) => {
                let mut day = 0.0;
                let mut previous: Option<f64> = None;
                for &i in rows {
                    if let TimeValue::TimeOfDay(t) = raw[i].time {
                        let tod = f64::from(t.num_seconds_from_midnight()) + f64::from(t.nanosecond()) * 1e-9;
                        if previous.is_some_and(|p| tod < p) {
                            day += SECONDS_PER_DAY;
                        }
                        previous = Some(tod);
                        seconds[i] = day + tod;
                    }
                }
            }
        }
        let start = rows.iter().map(|&i| seconds[i]).fold(f64::INFINITY, f64::min);
        for &i in rows {
            seconds[i] -= start;
        }
    }
    Ok(raw
        .into_iter()
        .zip(seconds)
        .map(|(r, time_s)| CycleRecord {
            cell_id: r.cell_id,
            cycle: r.cycle,
            step: r.step,
            time_s,
            current_a: r.current_a,
            voltage_v: r.voltage_v,
            capacity_ah: r.capacity_ah,
        })
        .collect())
}

fn elapsed(from: NaiveDateTime, to: NaiveDateTime) -> f64 {
    let d = to - from;
    let whole = d.num_seconds();
    let frac = (d - chrono::TimeDelta::seconds(whole)).num_nanoseconds().unwrap_or(0);
    whole as f64 + frac as f64 * 1e-9
}

/// [`read_raw`] followed by [`standardize_time`]. Without a capacity column,
/// records are ordered by cell and time and capacity is reconstructed.
pub fn parse_cycler_reader<R: Read>(reader: R, source: &str, spec: &CellSpec) -> Result<Parsed, IngestError> {
    let (raw, report) = read_raw(reader, source, spec)?;
    let mut records = standardize_time(raw, source)?;
    if report.capacity_reconstructed {
        records.sort_by(|a, b| a.cell_id.cmp(&b.cell_id).then(a.time_s.total_cmp(&b.time_s)));
        reconstruct_capacity(&mut records);
    }
    Ok(Parsed { records, report })
}

pub fn parse_cycler_csv(path: &Path, spec: &CellSpec) -> Result<Parsed, IngestError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: name.clone(),
        source,
    })?;
    parse_cycler_reader(io::BufReader::new(file), &name, spec)
}

/// A dataset assembled from several files.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub dataset: Dataset,
    pub reports: Vec<ParseReport>,
    pub merge: MergeStats,
}

/// Parses each file into its own dataset and merges them. Provenance holds
/// the file names.
pub fn load_dataset<P: AsRef<Path>>(paths: &[P], spec: &CellSpec) -> Result<Loaded, IngestError> {
    let mut parts = Vec::with_capacity(paths.len());
    let mut reports = Vec::with_capacity(paths.len());
    let mut duplicates = 0;
    for path in paths {
        let path = path.as_ref();
        let parsed = parse_cycler_csv(path, spec)?;
        let name = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        let (part, stats) = Dataset::from_records(parsed.records, vec![name])?;
        duplicates += stats.duplicates_dropped;
        parts.push(part);
        reports.push(parsed.report);
    }
    let (dataset, stats) = merge_datasets(parts)?;
    Ok(Loaded {
        dataset,
        reports,
        merge: MergeStats {
            duplicates_dropped: duplicates + stats.duplicates_dropped,
        },
    })
}

/// Union of `parts`; identical copies of a record are dropped and counted.
pub fn merge_datasets(parts: impl IntoIterator<Item = Dataset>) -> Result<(Dataset, MergeStats), IngestError> {
    let (dataset, stats) = Dataset::merge(parts)?;
    if stats.duplicates_dropped > 0 {
        log::info!("merge dropped {} duplicate records", stats.duplicates_dropped);
    }
    Ok((dataset, stats))
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn record_fields(r: &CycleRecord) -> [String; 7] {
    [
        r.cell_id.as_str().to_string(),
        r.cycle.to_string(),
        r.step.code().to_string(),
        fmt(r.time_s),
        fmt(r.current_a),
        fmt(r.voltage_v),
        fmt(r.capacity_ah),
    ]
}

/// Writes records in the canonical schema. Floats use the shortest form that
/// parses back to the same bits.
pub fn write_records<'a, W: Write>(writer: W, records: impl IntoIterator<Item = &'a CycleRecord>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record(record_fields(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Canonical schema with filtered current and voltage, plus the raw values in
/// [`RAW_COLUMNS`]. `raw` and `filtered` must be aligned.
pub fn write_denoised<W: Write>(writer: W, raw: &[CycleRecord], filtered: &[CycleRecord]) -> csv::Result<()> {
    assert_eq!(raw.len(), filtered.len(), "raw and filtered records must align");
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER.iter().chain(&RAW_COLUMNS))?;
    for (r, f) in raw.iter().zip(filtered) {
        let mut fields = record_fields(f).to_vec();
        fields.push(fmt(r.current_a));
        fields.push(fmt(r.voltage_v));
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}
