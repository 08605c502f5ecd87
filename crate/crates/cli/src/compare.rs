//! The `compare` command: align finished runs and emit plot-ready data.
//!
//! Writes `report.json` plus three long-format CSV files:
//! `loss_vs_flops.csv`, `lambda_max.csv` and `epoch_histogram.csv`.
//! The first run is the baseline for loss differences.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{format_f64, read_metrics, MetricRecord};
use crate::run::{create, read_summary, RunSummary};
use crate::{to_json, CliError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub name: String,
    pub policy: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub final_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_val_epoch: Option<usize>,
    /// Cumulative forward + backward + NTK FLOPs through the best-validation epoch.
    pub flops_to_best_val: Option<u64>,
    pub total_flops: u64,
    pub backward_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDifference {
    pub epoch: usize,
    pub train: Option<f64>,
    pub val: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceSeries {
    pub run: String,
    /// `run − baseline` at every epoch both runs reached.
    pub points: Vec<LossDifference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub layer: usize,
    pub slot: usize,
    /// One count per run, in run order.
    pub epochs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub baseline: String,
    pub runs: Vec<RunEntry>,
    pub loss_difference: Vec<DifferenceSeries>,
    pub epoch_histogram: Vec<HistogramRow>,
}

struct Loaded {
    name: String,
    summary: RunSummary,
    globals: Vec<MetricRecord>,
    modules: Vec<MetricRecord>,
}

fn load(dir: &Path) -> Result<(RunSummary, Vec<MetricRecord>), CliError> {
    let path = dir.join("metrics.csv");
    let metrics = read_metrics(File::open(&path).map_err(CliError::io(&path))?)?;
    Ok((read_summary(dir)?, metrics))
}

fn names(dirs: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    dirs.iter()
        .enumerate()
        .map(|(i, d)| {
            let base = d
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run{i}"));
            if seen.insert(base.clone()) {
                base
            } else {
                format!("{base}#{i}")
            }
        })
        .collect()
}

fn cumulative_flops(globals: &[MetricRecord]) -> Vec<u64> {
    globals
        .iter()
        .scan(0u64, |acc, r| {
            *acc += r.flops_fwd + r.flops_bwd + r.flops_ntk;
            Some(*acc)
        })
        .collect()
}

fn check_compatible(runs: &[Loaded]) -> Result<(), CliError> {
    let first = &runs[0];
    for r in &runs[1..] {
        let (a, b) = (&first.summary, &r.summary);
        if a.architecture != b.architecture || a.dataset != b.dataset || a.modules != b.modules {
            return Err(CliError::Compatibility(format!(
                "{} ({} on {}, {} modules) and {} ({} on {}, {} modules) are different experiments",
                first.name, a.architecture, a.dataset, a.modules, r.name, b.architecture, b.dataset, b.modules
            )));
        }
    }
    Ok(())
}

pub fn compare(dirs: &[PathBuf], out: &Path) -> Result<CompareReport, CliError> {
    if dirs.len() < 2 {
        return Err(CliError::Compatibility(format!("need at least two runs, got {}", dirs.len())));
    }
    let runs = dirs
        .iter()
        .zip(names(dirs))
        .map(|(dir, name)| {
            let (summary, metrics) = load(dir)?;
            let (globals, modules) = metrics.into_iter().partition(MetricRecord::is_global);
            Ok(Loaded { name, summary, globals, modules })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    check_compatible(&runs)?;

    let entries = runs
        .iter()
        .map(|r| {
            let cumulative = cumulative_flops(&r.globals);
            let best = r
                .globals
                .iter()
                .enumerate()
                .filter_map(|(i, g)| g.val_loss.map(|v| (i, v)))
                .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
                    Some((_, b)) if b <= v => best,
                    _ => Some((i, v)),
                });
            RunEntry {
                name: r.name.clone(),
                policy: r.summary.policy.clone(),
                seed: r.summary.seed,
                epochs_run: r.summary.epochs_run,
                final_val_loss: r.globals.last().and_then(|g| g.val_loss),
                best_val_loss: best.map(|b| b.1),
                best_val_epoch: best.map(|b| r.globals[b.0].epoch),
                flops_to_best_val: best.map(|b| cumulative[b.0]),
                total_flops: r.summary.flops.total,
                backward_flops: r.summary.flops.backward,
            }
        })
        .collect();

    let base: BTreeMap<usize, &MetricRecord> = runs[0].globals.iter().map(|g| (g.epoch, g)).collect();
    let diff = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
    let loss_difference = runs
        .iter()
        .map(|r| DifferenceSeries {
            run: r.name.clone(),
            points: r
                .globals
                .iter()
                .filter_map(|g| {
                    let b = base.get(&g.epoch)?;
                    Some(LossDifference {
                        epoch: g.epoch,
                        train: diff(g.train_loss, b.train_loss),
                        val: diff(g.val_loss, b.val_loss),
                    })
                })
                .collect(),
        })
        .collect();

    let mut hist: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        for h in &r.summary.epoch_histogram {
            hist.entry((h.layer, h.slot)).or_insert_with(|| vec![0; runs.len()])[i] = h.epochs;
        }
    }
    let report = CompareReport {
        baseline: runs[0].name.clone(),
        runs: entries,
        loss_difference,
        epoch_histogram: hist
            .into_iter()
            .map(|((layer, slot), epochs)| HistogramRow { layer, slot, epochs })
            .collect(),
    };

    fs::create_dir_all(out).map_err(CliError::io(out))?;
    fs::write(out.join("report.json"), to_json(&report)?).map_err(CliError::io(out.join("report.json")))?;
    write_plot_data(&runs, &report, out)?;
    Ok(report)
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let fail = |e: csv::Error| CliError::Format(e.to_string());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>()).map_err(fail)?;
    }
    w.flush().map_err(CliError::io(path))
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

fn write_plot_data(runs: &[Loaded], report: &CompareReport, out: &Path) -> Result<(), CliError> {
    let mut loss_rows = Vec::new();
    let mut lambda_rows = Vec::new();
    for r in runs {
        for (g, flops) in r.globals.iter().zip(cumulative_flops(&r.globals)) {
            loss_rows.push(vec![
                r.name.clone(),
                g.epoch.to_string(),
                flops.to_string(),
                opt(g.train_loss),
                opt(g.val_loss),
            ]);
        }
        for m in &r.modules {
            let id = m.module.expect("module row");
            lambda_rows.push(vec![
                r.name.clone(),
                m.epoch.to_string(),
                id.layer.to_string(),
                id.slot.to_string(),
                opt(m.lambda_max),
            ]);
        }
    }
    write_csv(
        &out.join("loss_vs_flops.csv"),
        &["run", "epoch", "cumulative_flops", "train_loss", "val_loss"],
        loss_rows,
    )?;
    write_csv(
        &out.join("lambda_max.csv"),
        &["run", "epoch", "module_layer", "module_slot", "lambda_max"],
        lambda_rows,
    )?;
    let hist_rows = report.epoch_histogram.iter().flat_map(|h| {
        runs.iter().zip(&h.epochs).map(move |(r, e)| {
            vec![r.name.clone(), h.layer.to_string(), h.slot.to_string(), e.to_string()]
        })
    });
    write_csv(
        &out.join("epoch_histogram.csv"),
        &["run", "module_layer", "module_slot", "epochs"],
        hist_rows,
    )
}
