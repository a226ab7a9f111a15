//! Domain types shared by every stage of the pipeline.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Voltage thresholds enforced by the cycler for every chemistry.
pub const PROTECTION_WINDOW_V: (f64, f64) = (2.5, 4.3);

/// Opaque identifier of a cell (or of a test regime run on one cell).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub String);

impl CellId {
    pub fn new(id: impl Into<String>) -> Self {
        CellId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CellId {
    fn from(s: &str) -> Self {
        CellId::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StepKind {
    Charge,
    Discharge,
    Rest,
}

impl StepKind {
    /// Label used in the canonical CSV schema.
    pub fn code(self) -> &'static str {
        match self {
            StepKind::Charge => "CHG",
            StepKind::Discharge => "DCH",
            StepKind::Rest => "REST",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "CHG" => Some(StepKind::Charge),
            "DCH" => Some(StepKind::Discharge),
            "REST" => Some(StepKind::Rest),
            _ => None,
        }
    }

    pub fn is_active(self) -> bool {
        !matches!(self, StepKind::Rest)
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepKind::Charge => "charge",
            StepKind::Discharge => "discharge",
            StepKind::Rest => "rest",
        })
    }
}

/// One timestamped sample of a cell under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cell_id: CellId,
    pub cycle: u32,
    pub step: StepKind,
    /// Seconds since the start of the test.
    pub time_s: f64,
    /// Signed current, positive while charging.
    pub current_a: f64,
    pub voltage_v: f64,
    /// Capacity accumulated since the start of the current step.
    pub capacity_ah: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Chemistry {
    /// LiNiCoAlO2 (NCA) cathode.
    LiNiCoAlO2,
    /// LiFePO4 (LFP) cathode.
    LiFePO4,
}

impl Chemistry {
    pub fn slug(self) -> &'static str {
        match self {
            Chemistry::LiNiCoAlO2 => "nca",
            Chemistry::LiFePO4 => "lifepo4",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nca" | "linicoalo2" => Some(Chemistry::LiNiCoAlO2),
            "lfp" | "lifepo4" => Some(Chemistry::LiFePO4),
            _ => None,
        }
    }
}

impl fmt::Display for Chemistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Chemistry::LiNiCoAlO2 => "LiNiCoAlO2",
            Chemistry::LiFePO4 => "LiFePO4",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CellSpecError {
    #[error("nominal capacity must be positive, got {0}")]
    NonPositiveCapacity(f64),
    #[error("voltages must satisfy min < nominal < max (got {min} / {nominal} / {max})")]
    VoltageOrder { min: f64, nominal: f64, max: f64 },
}

/// Datasheet values of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub chemistry: Chemistry,
    pub nominal_capacity_ah: f64,
    pub nominal_voltage_v: f64,
    pub max_voltage_v: f64,
    pub min_voltage_v: f64,
}

impl CellSpec {
    pub fn new(
        chemistry: Chemistry,
        nominal_capacity_ah: f64,
        nominal_voltage_v: f64,
        max_voltage_v: f64,
        min_voltage_v: f64,
    ) -> Result<Self, CellSpecError> {
        if !(nominal_capacity_ah > 0.0) {
            return Err(CellSpecError::NonPositiveCapacity(nominal_capacity_ah));
        }
        if !(min_voltage_v < nominal_voltage_v && nominal_voltage_v < max_voltage_v) {
            return Err(CellSpecError::VoltageOrder {
                min: min_voltage_v,
                nominal: nominal_voltage_v,
                max: max_voltage_v,
            });
        }
        Ok(CellSpec {
            chemistry,
            nominal_capacity_ah,
            nominal_voltage_v,
            max_voltage_v,
            min_voltage_v,
        })
    }

    /// Hongli A18650 LiNiCoAlO2 cell: 2200 mAh, 3.7 V nominal, 2.5 to 4.2 V.
    pub fn hongli_a18650() -> Self {
        CellSpec {
            chemistry: Chemistry::LiNiCoAlO2,
            nominal_capacity_ah: 2.2,
            nominal_voltage_v: 3.7,
            max_voltage_v: 4.2,
            min_voltage_v: 2.5,
        }
    }

    /// A123 ANR26650 LiFePO4 cell: 2500 mAh, 3.3 V nominal, 2.5 to 3.6 V.
    pub fn a123_anr26650() -> Self {
        CellSpec {
            chemistry: Chemistry::LiFePO4,
            nominal_capacity_ah: 2.5,
            nominal_voltage_v: 3.3,
            max_voltage_v: 3.6,
            min_voltage_v: 2.5,
        }
    }

    pub fn for_chemistry(chemistry: Chemistry) -> Self {
        match chemistry {
            Chemistry::LiNiCoAlO2 => Self::hongli_a18650(),
            Chemistry::LiFePO4 => Self::a123_anr26650(),
        }
    }

    /// Current in amperes corresponding to `c_rate`.
    pub fn current_for(&self, c_rate: f64) -> f64 {
        c_rate * self.nominal_capacity_ah
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurveError {
    #[error("voltage and capacity lengths differ ({voltage} vs {capacity})")]
    LengthMismatch { voltage: usize, capacity: usize },
    #[error("a half-cycle curve needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("voltage is not strictly monotone at index {0}")]
    NonMonotone(usize),
    #[error("rest steps cannot form a half-cycle curve")]
    RestStep,
}

/// Capacity against voltage for one charge or discharge step.
///
/// Voltage is strictly increasing for charge and strictly decreasing for
/// discharge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfCycleCurve {
    pub cell_id: CellId,
    pub cycle: u32,
    pub step: StepKind,
    pub c_rate: f64,
    voltage_v: Vec<f64>,
    capacity_ah: Vec<f64>,
}

impl HalfCycleCurve {
    pub fn new(
        cell_id: CellId,
        cycle: u32,
        step: StepKind,
        c_rate: f64,
        voltage_v: Vec<f64>,
        capacity_ah: Vec<f64>,
    ) -> Result<Self, CurveError> {
        if step == StepKind::Rest {
            return Err(CurveError::RestStep);
        }
        if voltage_v.len() != capacity_ah.len() {
            return Err(CurveError::LengthMismatch {
                voltage: voltage_v.len(),
                capacity: capacity_ah.len(),
            });
        }
        if voltage_v.len() < 2 {
            return Err(CurveError::TooShort(voltage_v.len()));
        }
        let ascending = step == StepKind::Charge;
        for (i, w) in voltage_v.windows(2).enumerate() {
            let ok = if ascending { w[1] > w[0] } else { w[1] < w[0] };
            if !ok {
                return Err(CurveError::NonMonotone(i + 1));
            }
        }
        Ok(HalfCycleCurve {
            cell_id,
            cycle,
            step,
            c_rate,
            voltage_v,
            capacity_ah,
        })
    }

    pub fn voltage(&self) -> &[f64] {
        &self.voltage_v
    }

    pub fn capacity(&self) -> &[f64] {
        &self.capacity_ah
    }

    pub fn len(&self) -> usize {
        self.voltage_v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltage_v.is_empty()
    }

    /// Lowest and highest voltage on the curve.
    pub fn voltage_span(&self) -> (f64, f64) {
        let first = self.voltage_v[0];
        let last = self.voltage_v[self.voltage_v.len() - 1];
        if first < last {
            (first, last)
        } else {
            (last, first)
        }
    }

    /// `|Q_last - Q_first|`.
    pub fn capacity_swing(&self) -> f64 {
        (self.capacity_ah[self.capacity_ah.len() - 1] - self.capacity_ah[0]).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MergeError {
    #[error("cell {cell_id} has two different records at t={time_s} s ({step})")]
    ConflictingDuplicate { cell_id: CellId, time_s: f64, step: StepKind },
}

/// Records of several cells, each sorted by time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub cells: BTreeMap<CellId, Vec<CycleRecord>>,
    pub provenance: Vec<String>,
}

/// Bookkeeping returned by [`Dataset::merge`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeStats {
    pub duplicates_dropped: usize,
}

impl Dataset {
    /// Groups records by cell and sorts each cell by time. Exact duplicates
    /// are dropped.
    pub fn from_records(records: impl IntoIterator<Item = CycleRecord>, provenance: Vec<String>) -> Result<(Self, MergeStats), MergeError> {
        let mut cells: BTreeMap<CellId, Vec<CycleRecord>> = BTreeMap::new();
        for r in records {
            cells.entry(r.cell_id.clone()).or_default().push(r);
        }
        let mut stats = MergeStats::default();
        for records in cells.values_mut() {
            stats.duplicates_dropped += sort_and_dedup(records)?;
        }
        Ok((Dataset { cells, provenance }, stats))
    }

    /// Union of all parts. Identical copies of a record are dropped and
    /// counted; two different records with the same key are an error.
    pub fn merge(parts: impl IntoIterator<Item = Dataset>) -> Result<(Self, MergeStats), MergeError> {
        let mut cells: BTreeMap<CellId, Vec<CycleRecord>> = BTreeMap::new();
        let mut provenance = Vec::new();
        for part in parts {
            provenance.extend(part.provenance);
            for (id, records) in part.cells {
                cells.entry(id).or_default().extend(records);
            }
        }
        let mut stats = MergeStats::default();
        for records in cells.values_mut() {
            stats.duplicates_dropped += sort_and_dedup(records)?;
        }
        Ok((Dataset { cells, provenance }, stats))
    }

    pub fn record_count(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    /// All records, cell by cell.
    pub fn records(&self) -> impl Iterator<Item = &CycleRecord> {
        self.cells.values().flatten()
    }
}

fn sort_and_dedup(records: &mut Vec<CycleRecord>) -> Result<usize, MergeError> {
    records.sort_by(|a, b| a.time_s.total_cmp(&b.time_s).then(a.step.cmp(&b.step)).then(a.cycle.cmp(&b.cycle)));
    let before = records.len();
    let mut out: Vec<CycleRecord> = Vec::with_capacity(before);
    for r in records.drain(..) {
        if let Some(last) = out.last() {
            if last.time_s == r.time_s && last.step == r.step {
                if *last == r {
                    continue;
                }
                return Err(MergeError::ConflictingDuplicate {
                    cell_id: r.cell_id.clone(),
                    time_s: r.time_s,
                    step: r.step,
                });
            }
        }
        out.push(r);
    }
    let dropped = before - out.len();
    *records = out;
    Ok(dropped)
}
