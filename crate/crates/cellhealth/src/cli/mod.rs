//! The `cellhealth` command line.
//!
//! Exit codes: 0 on success, 1 when the invocation or its inputs are invalid,
//! 2 when a valid run fails. Failures also leave `error.json` in the output
//! directory. Every successful run writes `manifest-<subcommand>.json`
//! (configuration echo, seeds, input and output hashes) and
//! `timing-<subcommand>.json` (wall clock, not reproducible).

mod analysis;
mod data;
mod model;

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::CheckpointError;
use crate::config::{ConfigError, RunConfig};
use crate::ingest::IngestError;
use crate::manifest::{digest_file, Manifest, Timing, TOOL};
use crate::svg::{emit_svg_panels, emit_svg_plot, Panel, PlotError, PlotStyle, Series};
use cellhealth_core::nn::ModelVariant;
use cellhealth_core::train::TrainError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(
    name = "cellhealth",
    version,
    about = "Battery cell health prognosis: EKF denoising, CNN-LSTM capacity model, dQ/dV peak analysis"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// nca or lifepo4.
    #[arg(long, global = true)]
    pub chemistry: Option<String>,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic four-regime cycler run plus its ground truth.
    Synth(SynthArgs),
    /// Parse, standardize and merge cycler CSV files.
    Ingest(InputArgs),
    /// EKF-filter current and voltage of every step.
    Denoise(InputArgs),
    /// Train one capacity model per C-rate regime.
    Train(TrainArgs),
    /// Evaluate saved checkpoints on a dataset.
    Eval(EvalArgs),
    /// Rank a hyperparameter grid by test MSE.
    Grid(GridArgs),
    /// Differential capacity curves of every half-cycle.
    Dca(DcaArgs),
    /// Peak tables per curve and peak trends across C-rates.
    Peaks(PeaksArgs),
    /// One trend table and plot per peak label and step.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Denoise(_) => "denoise",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Grid(_) => "grid",
            Command::Dca(_) => "dca",
            Command::Peaks(_) => "peaks",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Args, Debug)]
pub struct InputArgs {
    /// Canonical cycler CSV files.
    #[arg(long = "input", required = true, num_args = 1.., value_name = "CSV")]
    pub input: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub cycles: Option<u32>,
    /// Turn off measurement noise.
    #[arg(long)]
    pub noiseless: bool,
    /// Keep one 10 Hz sample in N.
    #[arg(long, value_name = "N")]
    pub decimation: Option<usize>,
    /// Fractional capacity loss per cycle.
    #[arg(long)]
    pub fade: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub window_len: Option<usize>,
    /// ekf-cnn-lstm or ekf-cnn.
    #[arg(long)]
    pub variant: Option<String>,
    /// One model for all regimes instead of one per C-rate.
    #[arg(long)]
    pub pooled: bool,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Also train the convolution-only model and compare.
    #[arg(long)]
    pub compare: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Directory searched for checkpoints [default: OUT/train/checkpoints].
    #[arg(long, value_name = "DIR")]
    pub checkpoints: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub batch_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub epoch_set: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub learning_rates: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct DcaArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Resampled points per curve.
    #[arg(long)]
    pub points: Option<usize>,
    /// Smoothing window (odd).
    #[arg(long)]
    pub window: Option<usize>,
    /// Smoothing polynomial order.
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub no_smooth: bool,
}

#[derive(Args, Debug)]
pub struct PeaksArgs {
    /// dQ/dV curves written by `dca` [default: OUT/dca/curves.json].
    #[arg(long, value_name = "JSON")]
    pub input: Option<PathBuf>,
    /// Prominence threshold as a fraction of the tallest candidate.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_name = "V")]
    pub charge_gate: Option<f64>,
    #[arg(long, value_name = "V")]
    pub discharge_gate: Option<f64>,
    /// Cycle used for the C-rate trends.
    #[arg(long)]
    pub cycle: Option<u32>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Trends written by `peaks` [default: OUT/peaks/trends.json].
    #[arg(long, value_name = "JSON")]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Validation,
    Runtime,
}

/// A failed run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    pub path: Option<String>,
}

impl CliError {
    pub fn validation(message: impl Into<String>, path: Option<&Path>) -> Self {
        CliError {
            kind: ErrorKind::Validation,
            message: message.into(),
            path: path.map(|p| p.display().to_string()),
        }
    }

    pub fn runtime(message: impl Into<String>, path: Option<&Path>) -> Self {
        CliError {
            kind: ErrorKind::Runtime,
            message: message.into(),
            path: path.map(|p| p.display().to_string()),
        }
    }

    fn with_path(mut self, path: Option<&str>) -> Self {
        self.path = path.map(str::to_string);
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 1,
            ErrorKind::Runtime => 2,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        let path = e.path().map(str::to_string);
        let base = match e {
            IngestError::Io { .. } => CliError::runtime(e.to_string(), None),
            _ => CliError::validation(e.to_string(), None),
        };
        base.with_path(path.as_deref())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let path = match &e {
            ConfigError::Io { path, .. } | ConfigError::Parse { path, .. } => Some(path.clone()),
            _ => None,
        };
        CliError::validation(e.to_string(), None).with_path(path.as_deref())
    }
}

impl From<PlotError> for CliError {
    fn from(e: PlotError) -> Self {
        let path = match &e {
            PlotError::Io { path, .. } => Some(path.clone()),
            _ => None,
        };
        CliError::runtime(e.to_string(), None).with_path(path.as_deref())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match &e {
            CheckpointError::Io { path, .. } => CliError::runtime(e.to_string(), Some(Path::new(path))),
            CheckpointError::Json { path, .. } => CliError::validation(e.to_string(), Some(Path::new(path))),
            _ => CliError::validation(e.to_string(), None),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_)
            | TrainError::TooFewCycles { .. }
            | TrainError::TooFewCyclesInCell { .. }
            | TrainError::EmptyGrid => CliError::validation(e.to_string(), None),
            _ => CliError::runtime(e.to_string(), None),
        }
    }
}

/// State of one subcommand invocation: resolved configuration, and every
/// input read and output written, for the manifest.
pub(crate) struct Ctx {
    pub config: RunConfig,
    pub out: PathBuf,
    subcommand: &'static str,
    inputs: Vec<(PathBuf, String)>,
    outputs: BTreeSet<String>,
    stages: Vec<(String, f64)>,
    child_seeds: BTreeMap<String, u64>,
    start: Instant,
}

impl Ctx {
    fn new(config: RunConfig, subcommand: &'static str) -> Result<Self, CliError> {
        let out = config.out.clone();
        fs::create_dir_all(&out).map_err(|e| CliError::validation(format!("cannot create output directory: {e}"), Some(&out)))?;
        Ok(Ctx {
            config,
            out,
            subcommand,
            inputs: Vec::new(),
            outputs: BTreeSet::new(),
            stages: Vec::new(),
            child_seeds: BTreeMap::new(),
            start: Instant::now(),
        })
    }

    /// Registers an input file, failing validation if it does not exist.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        if !path.is_file() {
            return Err(CliError::validation("input file does not exist", Some(path)));
        }
        self.inputs.push((path.to_path_buf(), path.display().to_string()));
        Ok(())
    }

    pub fn seed(&mut self, module: &str, seed: u64) {
        self.child_seeds.insert(module.to_string(), seed);
    }

    /// Absolute path of an output, creating its directory.
    pub fn path(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::runtime(e.to_string(), Some(parent)))?;
        }
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(|e| CliError::runtime(e.to_string(), Some(&p)))?;
        self.outputs.insert(rel.to_string());
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string(), None))?;
        text.push('\n');
        self.write(rel, text)
    }

    pub fn svg(&mut self, rel: &str, series: &[Series], style: &PlotStyle) -> Result<(), CliError> {
        let p = self.path(rel)?;
        emit_svg_plot(&p, series, style)?;
        self.outputs.insert(rel.to_string());
        Ok(())
    }

    pub fn panels(&mut self, rel: &str, panels: &[Panel], columns: usize) -> Result<(), CliError> {
        let p = self.path(rel)?;
        emit_svg_panels(&p, panels, columns)?;
        self.outputs.insert(rel.to_string());
        Ok(())
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T, CliError>) -> Result<T, CliError> {
        let t = Instant::now();
        let r = f(self);
        self.stages.push((name.to_string(), t.elapsed().as_secs_f64()));
        r
    }

    fn finish(self) -> Result<(), CliError> {
        let digest = |p: &Path, label: String| digest_file(p, label).map_err(|e| CliError::runtime(e.to_string(), Some(p)));
        let inputs = self
            .inputs
            .iter()
            .map(|(p, label)| digest(p, label.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let outputs = self
            .outputs
            .iter()
            .map(|rel| digest(&self.out.join(rel), rel.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let manifest = Manifest {
            tool: TOOL.to_string(),
            version: VERSION.to_string(),
            subcommand: self.subcommand.to_string(),
            seed: self.config.seed,
            child_seeds: self.child_seeds,
            config: serde_json::to_value(&self.config).map_err(|e| CliError::runtime(e.to_string(), None))?,
            inputs,
            outputs,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        let manifest_path = self.out.join(format!("manifest-{}.json", self.subcommand));
        fs::write(&manifest_path, manifest.to_json()).map_err(|e| CliError::runtime(e.to_string(), Some(&manifest_path)))?;
        let timing = Timing {
            subcommand: self.subcommand.to_string(),
            wall_clock_s: self.start.elapsed().as_secs_f64(),
            stages: self.stages,
        };
        let timing_path = self.out.join(format!("timing-{}.json", self.subcommand));
        let text = serde_json::to_string_pretty(&timing).map_err(|e| CliError::runtime(e.to_string(), None))?;
        fs::write(&timing_path, text + "\n").map_err(|e| CliError::runtime(e.to_string(), Some(&timing_path)))?;
        Ok(())
    }
}

pub(crate) fn parse_variant(s: &str) -> Result<ModelVariant, CliError> {
    ModelVariant::from_slug(s)
        .ok_or_else(|| CliError::validation(format!("unknown model variant `{s}` (expected ekf-cnn-lstm or ekf-cnn)"), None))
}

fn apply_train_flags(config: &mut RunConfig, flags: &TrainFlags) -> Result<(), CliError> {
    let t = &mut config.train.config;
    if let Some(v) = flags.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = flags.epochs {
        t.epochs = v;
    }
    if let Some(v) = flags.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = flags.window_len {
        t.window_len = v;
    }
    if let Some(v) = &flags.variant {
        t.model_variant = parse_variant(v)?;
    }
    if flags.pooled {
        t.per_c_rate = false;
    }
    if let Some(v) = flags.dropout {
        t.dropout_rate = v;
    }
    Ok(())
}

/// Loads the configuration file and applies every flag.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::validation("config file does not exist", Some(path)));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out = o.clone();
    }
    if let Some(c) = &cli.chemistry {
        config.chemistry = c.clone();
    }
    match &cli.command {
        Command::Synth(a) => {
            if let Some(c) = a.cycles {
                config.synth.cycles = c;
            }
            if a.noiseless {
                config.synth.noiseless = true;
            }
            if a.decimation.is_some() {
                config.synth.decimation = a.decimation;
            }
            if a.fade.is_some() {
                config.synth.fade_per_cycle = a.fade;
            }
        }
        Command::Train(a) => {
            apply_train_flags(&mut config, &a.train)?;
            if a.compare {
                config.train.compare = true;
            }
        }
        Command::Grid(a) => {
            apply_train_flags(&mut config, &a.train)?;
            if let Some(v) = &a.batch_sizes {
                config.grid.batch_sizes = v.clone();
            }
            if let Some(v) = &a.epoch_set {
                config.grid.epochs = v.clone();
            }
            if let Some(v) = &a.learning_rates {
                config.grid.learning_rates = v.clone();
            }
        }
        Command::Dca(a) => {
            if let Some(v) = a.points {
                config.dca.n_points = v;
            }
            if let Some(v) = a.window {
                config.dca.window = v;
            }
            if let Some(v) = a.order {
                config.dca.poly_order = v;
            }
            if a.no_smooth {
                config.dca.smooth = false;
            }
        }
        Command::Peaks(a) => {
            if let Some(v) = a.threshold {
                config.peaks.threshold = v;
            }
            if let Some(v) = a.charge_gate {
                config.peaks.charge_gate_v = v;
            }
            if let Some(v) = a.discharge_gate {
                config.peaks.discharge_gate_v = v;
            }
            if a.cycle.is_some() {
                config.peaks.cycle = a.cycle;
            }
        }
        Command::Ingest(_) | Command::Denoise(_) | Command::Eval(_) | Command::Report(_) => {}
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: &Cli) -> Result<(), (CliError, Option<PathBuf>)> {
    let fallback_out = cli.out.clone();
    let config = resolve_config(cli).map_err(|e| (e, fallback_out.clone()))?;
    let out = config.out.clone();
    let name = cli.command.name();
    let mut ctx = Ctx::new(config, name).map_err(|e| (e, None))?;
    let result = match &cli.command {
        Command::Synth(_) => data::synth(&mut ctx),
        Command::Ingest(a) => data::ingest(&mut ctx, &a.input),
        Command::Denoise(a) => data::denoise(&mut ctx, &a.input),
        Command::Train(a) => model::train(&mut ctx, &a.input.input),
        Command::Eval(a) => model::eval(&mut ctx, &a.input.input, a.checkpoints.as_deref()),
        Command::Grid(a) => model::grid(&mut ctx, &a.input.input),
        Command::Dca(a) => analysis::dca(&mut ctx, &a.input.input),
        Command::Peaks(a) => analysis::peaks(&mut ctx, a.input.as_deref()),
        Command::Report(a) => analysis::report(&mut ctx, a.input.as_deref()),
    };
    result.and_then(|()| ctx.finish()).map_err(|e| (e, Some(out)))
}

fn write_error_record(dir: &Path, subcommand: &str, err: &CliError) {
    #[derive(Serialize)]
    struct Record<'a> {
        subcommand: &'a str,
        exit_code: i32,
        #[serde(flatten)]
        error: &'a CliError,
    }
    let record = Record {
        subcommand,
        exit_code: err.exit_code(),
        error: err,
    };
    if fs::create_dir_all(dir).is_ok() {
        if let Ok(text) = serde_json::to_string_pretty(&record) {
            let _ = fs::write(dir.join("error.json"), text + "\n");
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(()) => 0,
        Err((err, dir)) => {
            match &err.path {
                Some(p) => eprintln!("error: {} ({p})", err.message),
                None => eprintln!("error: {}", err.message),
            }
            if let Some(dir) = dir.or_else(|| Some(PathBuf::from("out"))) {
                write_error_record(&dir, cli.command.name(), &err);
            }
            err.exit_code()
        }
    }
}
