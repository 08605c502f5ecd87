//! The `run` command: resolve a spec, train, write the run directory.
//!
//! Files written to the output directory:
//!
//! * `resolved.ini`: the spec with every default spelled out
//! * `metrics.csv`: see [`crate::metrics`]
//! * `ledger.json`: FLOPs totals and per-epoch breakdown
//! * `summary.json`: losses, totals, epoch histogram, metrics hash
//! * `error.json` (and `checkpoint.json` after divergence) on failure
//!
//! A `.lock` file marks the directory as owned by a live run.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mat_core::{
    build_network, epoch_histogram, generate_dataset, train, FlopsLedger, RunResult, StopReason, TrainError,
};

use crate::config::{RawSpec, RunSpec};
use crate::metrics::{write_metrics, MetricRecord};
use crate::{to_json, CliError};

pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub spec: PathBuf,
    pub out: PathBuf,
    /// `(section, key, value)` applied over the spec file.
    pub overrides: Vec<(String, String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsTotals {
    pub forward: u64,
    pub backward: u64,
    pub backward_modular: u64,
    pub backward_shared: u64,
    pub ntk_overhead: u64,
    pub total: u64,
    pub overhead_ratio: f64,
}

impl From<&FlopsLedger> for FlopsTotals {
    fn from(l: &FlopsLedger) -> Self {
        FlopsTotals {
            forward: l.forward_total,
            backward: l.backward_total,
            backward_modular: l.backward_modular,
            backward_shared: l.backward_shared,
            ntk_overhead: l.ntk_overhead,
            total: l.total(),
            overhead_ratio: l.overhead_ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub layer: usize,
    pub slot: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: String,
    pub seed: u64,
    pub architecture: String,
    pub dataset: String,
    pub modules: usize,
    pub epochs_run: usize,
    pub stop_reason: String,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_val_epoch: Option<usize>,
    pub flops: FlopsTotals,
    pub epoch_histogram: Vec<HistogramEntry>,
    pub metrics_sha256: String,
}

fn stop_name(s: StopReason) -> &'static str {
    match s {
        StopReason::EpochsExhausted => "epochs_exhausted",
        StopReason::InformationEmpty => "information_empty",
        StopReason::Converged => "converged",
    }
}

#[derive(Serialize)]
struct LedgerFile<'a> {
    total: u64,
    overhead_ratio: f64,
    #[serde(flatten)]
    ledger: &'a FlopsLedger,
}

/// Exclusive ownership of an output directory; released on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(CliError::io(&path)(e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(CliError::io(path))
}

pub fn load_spec(opts: &RunOptions) -> Result<RunSpec, CliError> {
    let text = fs::read_to_string(&opts.spec).map_err(CliError::io(&opts.spec))?;
    let mut raw = RawSpec::parse(&text)?;
    for (section, key, value) in &opts.overrides {
        raw.set(section, key, value.clone());
    }
    crate::config::resolve(&raw)
}

/// Runs one experiment. On failure `error.json` is written before the error
/// is returned, whenever the output directory exists.
pub fn run(opts: &RunOptions) -> Result<RunSummary, CliError> {
    fs::create_dir_all(&opts.out).map_err(CliError::io(&opts.out))?;
    let _lock = Lock::acquire(&opts.out)?;
    let error_path = opts.out.join("error.json");
    let _ = fs::remove_file(&error_path);
    let result = execute(opts);
    if let Err(e) = &result {
        if let CliError::Train(TrainError::NonFinite { checkpoint, .. }) = e {
            write(&opts.out.join("checkpoint.json"), to_json(checkpoint)?)?;
        }
        write(&error_path, to_json(&e.record())?)?;
    }
    result
}

fn execute(opts: &RunOptions) -> Result<RunSummary, CliError> {
    let spec = load_spec(opts)?;
    write(&opts.out.join("resolved.ini"), spec.echo())?;
    let cfg = &spec.train;
    log::info!(
        "{} on {} with policy {}, seed {}",
        spec.architecture.name(),
        spec.dataset.name(),
        cfg.policy_kind.name(),
        cfg.seed
    );
    let data = generate_dataset::<f64>(&spec.dataset, cfg.seed)?;
    let net = build_network(&spec.architecture, cfg.seed).map_err(TrainError::from)?;
    let result = train(net, &data, cfg)?;
    log::info!("finished after {} epochs ({})", result.epochs_run(), stop_name(result.stop_reason));

    let records: Vec<MetricRecord> = result.rows.iter().map(MetricRecord::from).collect();
    let mut csv = Vec::new();
    write_metrics(&mut csv, &records)?;
    write(&opts.out.join("metrics.csv"), &csv)?;

    let ledger_path = opts.out.join("ledger.json");
    let ledger = LedgerFile {
        total: result.ledger.total(),
        overhead_ratio: result.ledger.overhead_ratio(),
        ledger: &result.ledger,
    };
    write(&ledger_path, to_json(&ledger)?)?;

    let summary = summarize(&spec, &result, &csv);
    write(&opts.out.join("summary.json"), to_json(&summary)?)?;
    Ok(summary)
}

fn summarize(spec: &RunSpec, result: &RunResult<f64>, metrics_csv: &[u8]) -> RunSummary {
    let vals = result.val_losses();
    let best = vals
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        });
    RunSummary {
        policy: spec.train.policy_kind.name().to_string(),
        seed: spec.train.seed,
        architecture: spec.architecture.name().to_string(),
        dataset: spec.dataset.name().to_string(),
        modules: result.modules.len(),
        epochs_run: result.epochs_run(),
        stop_reason: stop_name(result.stop_reason).to_string(),
        final_train_loss: result.train_losses().last().copied(),
        final_val_loss: result.final_val_loss(),
        best_val_loss: best.map(|b| b.1),
        best_val_epoch: best.map(|b| b.0),
        flops: FlopsTotals::from(&result.ledger),
        epoch_histogram: epoch_histogram(result)
            .into_iter()
            .map(|(id, epochs)| HistogramEntry {
                layer: id.layer,
                slot: id.slot,
                epochs,
            })
            .collect(),
        metrics_sha256: format!("{:x}", Sha256::digest(metrics_csv)),
    }
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, CliError> {
    let path = dir.join("summary.json");
    let file = File::open(&path).map_err(CliError::io(&path))?;
    serde_json::from_reader(io::BufReader::new(file))
        .map_err(|e| CliError::Compatibility(format!("{}: {e}", path.display())))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(CliError::io(path))
}
