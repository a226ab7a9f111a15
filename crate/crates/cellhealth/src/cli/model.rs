//! `train`, `eval` and `grid`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cellhealth_core::nn::ModelVariant;
use cellhealth_core::train::{
    evaluate, evaluate_autoregressive, grid_search, predict, prepare, regime_seed, train_regime, GridResult, Metrics, PreparedRegime,
    TrainReport,
};
use serde::Serialize;

use super::data::load;
use super::{CliError, Ctx};
use crate::checkpoint::Checkpoint;
use crate::svg::{PlotStyle, Series};

fn loss_series(reports: &[TrainReport], prefix: &str) -> Vec<Series> {
    let mut out = Vec::new();
    for r in reports {
        let xs: Vec<f64> = (1..=r.train_loss.len()).map(|e| e as f64).collect();
        out.push(Series::from_xy(format!("{prefix}{} train", r.label), &xs, &r.train_loss));
        out.push(Series::from_xy(format!("{prefix}{} test", r.label), &xs, &r.test_loss));
    }
    out
}

fn loss_csv(reports: &[TrainReport]) -> String {
    let mut s = String::from("label,epoch,train_loss,test_loss\n");
    for r in reports {
        for (e, (a, b)) in r.train_loss.iter().zip(&r.test_loss).enumerate() {
            let _ = writeln!(s, "{},{},{a},{b}", r.label, e + 1);
        }
    }
    s
}

fn train_variant(ctx: &mut Ctx, regimes: &[PreparedRegime], variant: ModelVariant) -> Result<Vec<TrainReport>, CliError> {
    let config = cellhealth_core::train::TrainConfig {
        model_variant: variant,
        ..ctx.config.train_config()
    };
    let slug = variant.slug();
    let mut reports = Vec::with_capacity(regimes.len());
    for regime in regimes {
        let label = regime.label.as_str();
        let seed = regime_seed(config.seed, label);
        ctx.seed(&format!("train/{slug}/{label}"), seed);
        let start = Instant::now();
        let (fitted, report) = ctx.stage(&format!("{slug}/{label}"), |_| Ok(train_regime(regime, &config)?))?;
        log::info!(
            "{slug} {label}: test mse {:.3e} after {} epochs in {:.1} s",
            report.final_metrics.mse,
            config.epochs,
            start.elapsed().as_secs_f64()
        );
        let checkpoint = Checkpoint {
            label: label.to_string(),
            seed,
            config: config.clone(),
            scaler: regime.scaler.clone(),
            params: fitted.params,
            adam: fitted.adam,
        };
        let rel = format!("train/checkpoints/{slug}/{label}.json");
        ctx.write(&rel, checkpoint.to_json()?)?;
        reports.push(report);
    }
    ctx.write(&format!("train/loss_{slug}.csv"), loss_csv(&reports))?;
    let style = PlotStyle {
        log_y: true,
        ..PlotStyle::titled(format!("{slug} loss"), "epoch", "MSE (scaled)")
    };
    ctx.svg(&format!("train/loss_{slug}.svg"), &loss_series(&reports, ""), &style)?;
    ctx.json(&format!("train/report_{slug}.json"), &reports)?;
    Ok(reports)
}

pub(crate) fn train(ctx: &mut Ctx, inputs: &[PathBuf]) -> Result<(), CliError> {
    let (dataset, _, _) = load(ctx, inputs)?;
    let t = ctx.config.train_config();
    ctx.seed("train", t.seed);
    let regimes = ctx.stage("prepare", |_| Ok(prepare(&dataset, t.window_len, t.per_c_rate)?))?;
    let primary = t.model_variant;
    let mut variants = vec![primary];
    if ctx.config.train.compare {
        variants.push(match primary {
            ModelVariant::EkfCnnLstm => ModelVariant::EkfCnn,
            ModelVariant::EkfCnn => ModelVariant::EkfCnnLstm,
        });
    }
    let mut all = Vec::new();
    for v in &variants {
        all.push((*v, train_variant(ctx, &regimes, *v)?));
    }
    if variants.len() > 1 {
        let mut csv = String::from("label,variant,test_mse,test_mae,test_rmse,final_train_loss\n");
        let mut series = Vec::new();
        for (v, reports) in &all {
            for r in reports {
                let m = r.final_metrics;
                let last = r.train_loss.last().copied().unwrap_or(f64::NAN);
                let _ = writeln!(csv, "{},{},{},{},{},{last}", r.label, v.slug(), m.mse, m.mae, m.rmse);
                let xs: Vec<f64> = (1..=r.test_loss.len()).map(|e| e as f64).collect();
                series.push(Series::from_xy(format!("{} {}", v.slug(), r.label), &xs, &r.test_loss));
            }
        }
        ctx.write("train/compare.csv", csv)?;
        let style = PlotStyle {
            log_y: true,
            ..PlotStyle::titled("test loss by model", "epoch", "MSE (scaled)")
        };
        ctx.svg("train/compare.svg", &series, &style)?;
    }
    Ok(())
}

fn find_checkpoints(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::validation("checkpoint directory does not exist", Some(dir)));
    }
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| CliError::runtime(e.to_string(), Some(&d)))?;
        for entry in entries {
            let p = entry.map_err(|e| CliError::runtime(e.to_string(), Some(&d)))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "json") {
                found.push(p);
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(CliError::validation("no checkpoints found", Some(dir)));
    }
    Ok(found)
}

#[derive(Serialize)]
struct EvalEntry {
    checkpoint: String,
    label: String,
    variant: &'static str,
    n_test: usize,
    /// Scaled target; each window sees the measured prior capacity.
    teacher_forced: Metrics,
    /// Scaled target; the prior capacity is the model's own prediction.
    autoregressive: Metrics,
}

pub(crate) fn eval(ctx: &mut Ctx, inputs: &[PathBuf], checkpoints: Option<&Path>) -> Result<(), CliError> {
    let (dataset, _, _) = load(ctx, inputs)?;
    let dir = checkpoints.map_or_else(|| ctx.out.join("train").join("checkpoints"), Path::to_path_buf);
    let files = find_checkpoints(&dir)?;
    let mut prepared: BTreeMap<(usize, bool), Vec<PreparedRegime>> = BTreeMap::new();
    let mut entries = Vec::new();
    let mut csv = String::from("label,variant,mode,mse,mae,rmse\n");
    for file in &files {
        ctx.input(file)?;
        let ck = Checkpoint::load(file)?;
        let key = (ck.config.window_len, ck.config.per_c_rate);
        if let std::collections::btree_map::Entry::Vacant(slot) = prepared.entry(key) {
            slot.insert(prepare(&dataset, key.0, key.1)?);
        }
        let regime = prepared[&key]
            .iter()
            .find(|r| r.label.as_str() == ck.label)
            .ok_or_else(|| CliError::validation(format!("dataset has no regime `{}`", ck.label), Some(file)))?;
        if regime.scaler != ck.scaler {
            return Err(CliError::validation(
                "checkpoint scaler does not match the training partition of this dataset",
                Some(file),
            ));
        }
        let variant = ck.params.variant().slug();
        let (teacher_forced, autoregressive, pred) = ctx.stage(&format!("{variant}/{}", ck.label), |_| {
            Ok((
                evaluate(&ck.params, &regime.test)?,
                evaluate_autoregressive(&ck.params, regime)?,
                predict(&ck.params, &regime.test)?,
            ))
        })?;
        let mut rows = String::from("index,capacity_ah,predicted_ah\n");
        let target = &regime.scaler.target;
        for (i, (w, y)) in regime.test.iter().zip(&pred).enumerate() {
            let _ = writeln!(rows, "{i},{},{}", target.unscale(0, w.target), target.unscale(0, *y));
        }
        ctx.write(&format!("eval/pred_{variant}_{}.csv", ck.label), rows)?;
        for (mode, m) in [("teacher_forced", teacher_forced), ("autoregressive", autoregressive)] {
            let _ = writeln!(csv, "{},{variant},{mode},{},{},{}", ck.label, m.mse, m.mae, m.rmse);
        }
        entries.push(EvalEntry {
            checkpoint: file.display().to_string(),
            label: ck.label.clone(),
            variant,
            n_test: regime.test.len(),
            teacher_forced,
            autoregressive,
        });
    }
    ctx.write("eval/metrics.csv", csv)?;
    ctx.json("eval/eval.json", &entries)
}

#[derive(Serialize)]
struct GridRegime {
    label: String,
    ranked: Vec<GridResult>,
}

pub(crate) fn grid(ctx: &mut Ctx, inputs: &[PathBuf]) -> Result<(), CliError> {
    let (dataset, _, _) = load(ctx, inputs)?;
    let base = ctx.config.train_config();
    ctx.seed("train", base.seed);
    let grid = ctx.config.grid.clone();
    let regimes = prepare(&dataset, base.window_len, base.per_c_rate)?;
    let mut csv = String::from("label,rank,batch_size,epochs,learning_rate,test_mse,test_mae,test_rmse\n");
    let mut out = Vec::new();
    for regime in &regimes {
        let label = regime.label.as_str().to_string();
        ctx.seed(&format!("grid/{label}"), regime_seed(base.seed, &label));
        let ranked = ctx.stage(&label, |_| Ok(grid_search(regime, &grid, &base)?))?;
        for (rank, r) in ranked.iter().enumerate() {
            let c = &r.config;
            let m = r.metrics;
            let _ = writeln!(
                csv,
                "{label},{},{},{},{},{},{},{}",
                rank + 1,
                c.batch_size,
                c.epochs,
                c.learning_rate,
                m.mse,
                m.mae,
                m.rmse
            );
        }
        out.push(GridRegime { label, ranked });
    }
    ctx.write("grid/grid.csv", csv)?;
    ctx.json("grid/grid.json", &out)
}
