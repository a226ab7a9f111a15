//! `synth`, `ingest` and `denoise`.

use std::collections::BTreeSet;
use std::path::PathBuf;

use cellhealth_core::ekf::denoise_records;
use cellhealth_core::synth::{default_calibration, generate_protocol_run, HalfCycleTruth, PROTOCOL};
use cellhealth_core::{CycleRecord, Dataset};
use serde::Serialize;

use super::{CliError, Ctx};
use crate::ingest::{load_dataset, write_denoised, write_records, ParseReport};

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::runtime(e.to_string(), None))?;
    Ok(buf)
}

/// Registers and loads the input files with the configured cell spec.
pub(crate) fn load(ctx: &mut Ctx, inputs: &[PathBuf]) -> Result<(Dataset, Vec<ParseReport>, usize), CliError> {
    for p in inputs {
        ctx.input(p)?;
    }
    let spec = ctx.config.cell_spec()?;
    let loaded = ctx.stage("load", |_| Ok(load_dataset(inputs, &spec)?))?;
    if loaded.dataset.record_count() == 0 {
        return Err(CliError::validation(
            "inputs hold no usable records",
            inputs.first().map(PathBuf::as_path),
        ));
    }
    Ok((loaded.dataset, loaded.reports, loaded.merge.duplicates_dropped))
}

#[derive(Serialize)]
struct TruthFile<'a> {
    chemistry: &'a str,
    cycles: u32,
    protocol: Vec<(f64, f64)>,
    seed: u64,
    config: &'a cellhealth_core::synth::SynthCellConfig,
    half_cycles: &'a [HalfCycleTruth],
}

pub(crate) fn synth(ctx: &mut Ctx) -> Result<(), CliError> {
    let chemistry = ctx.config.chemistry()?;
    let mut cal = default_calibration(chemistry);
    let section = ctx.config.synth.clone();
    if section.noiseless {
        cal = cal.noiseless();
    }
    if let Some(d) = section.decimation {
        cal.decimation = d;
    }
    if let Some(f) = section.fade_per_cycle {
        cal.fade_per_cycle = f;
    }
    cal.seed = ctx.config.synth_seed();
    ctx.seed("synth", cal.seed);
    let run = ctx.stage("generate", |_| {
        generate_protocol_run(&cal, &PROTOCOL, section.cycles).map_err(|e| CliError::validation(e.to_string(), None))
    })?;
    let bytes = csv_bytes(|b| write_records(b, run.dataset.records()))?;
    ctx.write("synth.csv", bytes)?;
    ctx.json(
        "synth_truth.json",
        &TruthFile {
            chemistry: chemistry.slug(),
            cycles: section.cycles,
            protocol: PROTOCOL.to_vec(),
            seed: cal.seed,
            config: &cal,
            half_cycles: &run.truth,
        },
    )?;
    log::info!("synth: {} records, {} half-cycles", run.dataset.record_count(), run.truth.len());
    Ok(())
}

#[derive(Serialize)]
struct CellCount {
    cell_id: String,
    records: usize,
    cycles: usize,
}

fn cell_counts(dataset: &Dataset) -> Vec<CellCount> {
    dataset
        .cells
        .iter()
        .map(|(id, recs)| {
            let cycles: BTreeSet<u32> = recs.iter().map(|r| r.cycle).collect();
            CellCount {
                cell_id: id.as_str().to_string(),
                records: recs.len(),
                cycles: cycles.len(),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct IngestReport {
    sources: Vec<ParseReport>,
    duplicates_dropped: usize,
    records: usize,
    cells: Vec<CellCount>,
}

pub(crate) fn ingest(ctx: &mut Ctx, inputs: &[PathBuf]) -> Result<(), CliError> {
    let (dataset, sources, duplicates_dropped) = load(ctx, inputs)?;
    let bytes = csv_bytes(|b| write_records(b, dataset.records()))?;
    ctx.write("dataset.csv", bytes)?;
    ctx.json(
        "ingest_report.json",
        &IngestReport {
            sources,
            duplicates_dropped,
            records: dataset.record_count(),
            cells: cell_counts(&dataset),
        },
    )
}

#[derive(Serialize)]
struct Residual {
    cell_id: String,
    records: usize,
    /// RMS of raw minus filtered.
    current_rms_a: f64,
    voltage_rms_v: f64,
}

#[derive(Serialize)]
struct DenoiseReport {
    sources: Vec<ParseReport>,
    cells: Vec<Residual>,
}

fn rms(a: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = a.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

pub(crate) fn denoise(ctx: &mut Ctx, inputs: &[PathBuf]) -> Result<(), CliError> {
    let (dataset, sources, _) = load(ctx, inputs)?;
    let mut raw: Vec<CycleRecord> = Vec::with_capacity(dataset.record_count());
    let mut filtered = Vec::with_capacity(dataset.record_count());
    let mut cells = Vec::new();
    ctx.stage("filter", |_| {
        for (id, recs) in &dataset.cells {
            let f = denoise_records(recs).map_err(|e| CliError::runtime(format!("cell {id}: {e}"), None))?;
            cells.push(Residual {
                cell_id: id.as_str().to_string(),
                records: recs.len(),
                current_rms_a: rms(recs.iter().zip(&f).map(|(r, f)| r.current_a - f.current_a)),
                voltage_rms_v: rms(recs.iter().zip(&f).map(|(r, f)| r.voltage_v - f.voltage_v)),
            });
            raw.extend(recs.iter().cloned());
            filtered.extend(f);
        }
        Ok(())
    })?;
    let bytes = csv_bytes(|b| write_denoised(b, &raw, &filtered))?;
    ctx.write("denoised.csv", bytes)?;
    ctx.json("denoise_report.json", &DenoiseReport { sources, cells })
}
