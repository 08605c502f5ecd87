//! Training loop with pluggable module schedules, FLOPs accounting and
//! metric collection.

mod ledger;
mod schedule;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ledger::{EpochFlops, FlopsLedger, MetricRow, RowScope};
pub use schedule::{
    EpochPlan, MatSchedule, MultirateSchedule, RandSchedule, Schedule, ScriptedSchedule, VanillaSchedule,
};

use crate::data::{generate_dataset, DataError, Dataset, DatasetKind};
use crate::mntk::{sample_indices, snapshot, MntkError, SpectrumSnapshot};
use crate::modelzoo::{
    Architecture, LossKind, ModelError, ModularNetwork, ModuleId, Scalarization, SharedRule,
};
use crate::policy::{PolicyConfig, PolicyError};
use crate::scalar::Scalar;
use ledger::condition_f64;

const SHUFFLE_STREAM: u64 = 1;
const RAND_STREAM: u64 = 2;
const MULTIRATE_STREAM: u64 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}, sample {sample}")]
    NonFinite {
        epoch: usize,
        step: usize,
        sample: usize,
        /// Parameters before the failing step.
        checkpoint: Vec<f64>,
    },
    #[error("protection error: {0}")]
    Protection(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mntk(#[from] MntkError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Vanilla,
    Rand,
    Multirate,
    #[default]
    Mat,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Vanilla => "vanilla",
            PolicyKind::Rand => "rand",
            PolicyKind::Multirate => "multirate",
            PolicyKind::Mat => "mat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultirateConfig {
    pub fraction_slow: f64,
    pub k: usize,
}

impl Default for MultirateConfig {
    fn default() -> Self {
        Self { fraction_slow: 0.5, k: 5 }
    }
}

/// Stop once validation loss fails to improve by `rel_tol` for `epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patience {
    pub epochs: usize,
    pub rel_tol: f64,
}

impl Default for Patience {
    fn default() -> Self {
        Self { epochs: 10, rel_tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub policy_kind: PolicyKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub policy: PolicyConfig,
    pub rand_fraction: f64,
    pub multirate: MultirateConfig,
    pub patience: Option<Patience>,
    pub scalarization: Scalarization,
    pub shared_rule: SharedRule,
    /// Record spectra at episode boundaries for every policy, not only MAT.
    /// Snapshots a policy does not need are not charged to the ledger.
    pub track_spectrum: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            policy_kind: PolicyKind::Mat,
            lr: 0.05,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            loss_kind: LossKind::SquaredError,
            policy: PolicyConfig::default(),
            rand_fraction: 0.5,
            multirate: MultirateConfig::default(),
            patience: Some(Patience::default()),
            scalarization: Scalarization::SumOfLogits,
            shared_rule: SharedRule::AlwaysActive,
            track_spectrum: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.rand_fraction > 0.0 && self.rand_fraction <= 1.0) {
            return bad(format!("rand_fraction must be in (0, 1], got {}", self.rand_fraction));
        }
        let slow = self.multirate.fraction_slow;
        if !(slow > 0.0 && slow < 1.0) || self.multirate.k == 0 {
            return bad("multirate needs fraction_slow in (0, 1) and k >= 1".into());
        }
        if let Some(p) = self.patience {
            if p.epochs == 0 || p.rel_tol.is_nan() || p.rel_tol < 0.0 {
                return bad("patience needs epochs >= 1 and rel_tol >= 0".into());
            }
        }
        self.policy.validate()?;
        Ok(())
    }

    /// Epoch `e` opens a policy episode.
    pub fn is_episode_start(&self, epoch: usize) -> bool {
        epoch >= self.policy.warmup && (epoch - self.policy.warmup).is_multiple_of(self.policy.cadence)
    }

    pub fn schedule<T: Scalar>(&self) -> Box<dyn Schedule<T>> {
        match self.policy_kind {
            PolicyKind::Vanilla => Box::new(VanillaSchedule),
            PolicyKind::Rand => Box::new(RandSchedule::new(
                self.rand_fraction,
                self.policy.protect_per_layer,
                schedule::stream(self.seed, RAND_STREAM),
            )),
            PolicyKind::Multirate => Box::new(MultirateSchedule::new(
                self.multirate.fraction_slow,
                self.multirate.k,
                schedule::stream(self.seed, MULTIRATE_STREAM),
            )),
            PolicyKind::Mat => Box::new(MatSchedule::new(self.policy.clone())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochsExhausted,
    InformationEmpty,
    Converged,
}

#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub rows: Vec<MetricRow>,
    pub ledger: FlopsLedger,
    pub network: ModularNetwork<T>,
    /// Modules trained in each completed epoch.
    pub active_epochs: Vec<BTreeSet<ModuleId>>,
    /// Modules of the network when the run started.
    pub modules: Vec<ModuleId>,
    pub snapshots: Vec<SpectrumSnapshot<T>>,
    pub stop_reason: StopReason,
}

impl<T: Scalar> RunResult<T> {
    pub fn epochs_run(&self) -> usize {
        self.active_epochs.len()
    }

    fn global_rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.scope == RowScope::Global)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.global_rows().filter_map(|r| r.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.global_rows().filter_map(|r| r.val_loss).collect()
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.val_losses().last().copied()
    }
}

/// Observer payload, emitted after every trained epoch.
pub struct EpochEvent<'a, T> {
    pub epoch: usize,
    pub active: &'a BTreeSet<ModuleId>,
    /// Parameters at the start of the epoch.
    pub before: &'a [T],
    pub network: &'a ModularNetwork<T>,
}

pub fn train<T: Scalar>(
    net: ModularNetwork<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<RunResult<T>, TrainError> {
    let mut schedule = cfg.schedule::<T>();
    train_with(net, data, cfg, schedule.as_mut(), &mut |_| {})
}

pub fn train_with<T: Scalar>(
    mut net: ModularNetwork<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    schedule: &mut dyn Schedule<T>,
    observer: &mut dyn FnMut(&EpochEvent<'_, T>),
) -> Result<RunResult<T>, TrainError> {
    cfg.validate()?;
    let n = data.train.len();
    let wants_snapshots = schedule.needs_snapshots() || cfg.track_spectrum;
    if wants_snapshots && cfg.policy.samples > n {
        return Err(TrainError::Config(format!(
            "{} spectrum samples requested from {n} training examples",
            cfg.policy.samples
        )));
    }
    net.set_shared_rule(cfg.shared_rule);
    let lr = T::lit(cfg.lr);
    let modules = net.module_ids();
    let mut shuffle = schedule::stream(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n).collect();

    let mut rows = Vec::new();
    let mut ledger = FlopsLedger::default();
    let mut active_epochs = Vec::new();
    let mut snapshots = Vec::new();
    let mut stop_reason = StopReason::EpochsExhausted;
    let mut best_val: Option<T> = None;
    let mut stale = 0;
    let mut step = 0;
    let mut episode = 0;

    for epoch in 0..cfg.epochs {
        if epoch == cfg.policy.warmup {
            net.reset_theta0();
        }
        let mut flops = EpochFlops { epoch, ..EpochFlops::default() };
        let snap = if wants_snapshots && cfg.is_episode_start(epoch) {
            let idx = sample_indices(n, cfg.policy.samples, cfg.seed, episode)?;
            episode += 1;
            let s = snapshot(&net, &data.train.inputs.select_rows(&idx), cfg.scalarization, epoch)?;
            if schedule.needs_snapshots() {
                flops.ntk = s.cost.total();
            }
            Some(s)
        } else {
            None
        };
        let plan = schedule.plan(epoch, &net, snap.as_ref())?;
        let active = match &plan {
            EpochPlan::Train(a) => a.clone(),
            EpochPlan::Halt => BTreeSet::new(),
        };
        if let Some(s) = &snap {
            for (&id, m) in &s.per_module {
                let mut row = MetricRow::blank(epoch, RowScope::Module(id), net.module_weight_distance(id)?.as_f64());
                row.lambda_max = Some(m.lambda_max.as_f64());
                row.lambda_min = Some(m.lambda_min.as_f64());
                row.effective_rank = m.effective_rank.map(Scalar::as_f64);
                row.condition_number = Some(condition_f64(m.condition));
                row.in_information = Some(active.contains(&id));
                rows.push(row);
            }
        }
        if plan == EpochPlan::Halt {
            ledger.ntk_overhead += flops.ntk;
            if let Some(s) = snap {
                snapshots.push(s);
            }
            stop_reason = StopReason::InformationEmpty;
            log::info!("epoch {epoch}: information set empty, stopping");
            break;
        }

        let before = net.parameters().to_vec();
        let modular_total = net.modular_param_count().max(1) as u128;
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.select(chunk);
            let lg = match net.loss_and_gradients(&batch, cfg.loss_kind) {
                Ok(lg) => lg,
                Err(ModelError::NonFiniteLoss { sample }) => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        sample: chunk[sample],
                        checkpoint: net.parameters().iter().map(|v| v.as_f64()).collect(),
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let rates = schedule.rates(step, &active, lr);
            net.apply_rates(&lg.gradients, &rates, lr)?;
            let updated: usize = rates
                .keys()
                .map(|&id| net.module(id).map(|m| m.param_count()))
                .sum::<Result<usize, _>>()?;
            let f = lg.forward_flops;
            flops.forward += f.total();
            flops.forward_modular += f.modular;
            flops.backward_modular += (2 * f.modular as u128 * updated as u128 / modular_total) as u64;
            flops.backward_shared += 2 * f.shared;
            step += 1;
        }

        let evaluate = |batch| match net.loss(batch, cfg.loss_kind) {
            Err(ModelError::NonFiniteLoss { sample }) => Err(TrainError::NonFinite {
                epoch,
                step,
                sample,
                checkpoint: before.iter().map(|v| v.as_f64()).collect(),
            }),
            other => other.map_err(TrainError::from),
        };
        let train_loss = evaluate(&data.train)?;
        let val_loss = evaluate(&data.validation)?;
        let mut row = MetricRow::blank(epoch, RowScope::Global, net.weight_distance().as_f64());
        if let Some(s) = &snap {
            row.lambda_max = Some(s.global_lambda_max.as_f64());
            row.lambda_min = Some(s.global_lambda_min.as_f64());
        }
        row.train_loss = Some(train_loss.as_f64());
        row.val_loss = Some(val_loss.as_f64());
        row.flops_forward = flops.forward;
        row.flops_backward = flops.backward();
        row.flops_ntk = flops.ntk;
        rows.push(row);
        ledger.push(flops);
        if let Some(s) = snap {
            snapshots.push(s);
        }
        observer(&EpochEvent {
            epoch,
            active: &active,
            before: &before,
            network: &net,
        });
        active_epochs.push(active);
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");

        if let Some(p) = cfg.patience {
            let improved = match best_val {
                None => true,
                Some(best) => val_loss < best * (T::one() - T::lit(p.rel_tol)),
            };
            if improved {
                best_val = Some(val_loss);
                stale = 0;
            } else {
                stale += 1;
                if stale >= p.epochs {
                    stop_reason = StopReason::Converged;
                    break;
                }
            }
        }
    }

    Ok(RunResult {
        rows,
        ledger,
        network: net,
        active_epochs,
        modules,
        snapshots,
        stop_reason,
    })
}

/// Number of epochs each module spent in the trained set.
pub fn epoch_histogram<T: Scalar>(result: &RunResult<T>) -> BTreeMap<ModuleId, usize> {
    let mut counts: BTreeMap<ModuleId, usize> = result.modules.iter().map(|&id| (id, 0)).collect();
    for active in &result.active_epochs {
        for id in active {
            *counts.entry(*id).or_default() += 1;
        }
    }
    counts
}

/// Keeps the `⌈keep_fraction·L⌉` modules with the largest λ_max (ties by
/// module id) and prunes the rest. Returns the pruned ids.
pub fn prune_by_lambda<T: Scalar>(
    net: &mut ModularNetwork<T>,
    snapshot: &SpectrumSnapshot<T>,
    keep_fraction: f64,
    protect_per_layer: bool,
) -> Result<BTreeSet<ModuleId>, TrainError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(TrainError::Config(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    let mut ranked = Vec::new();
    for id in net.module_ids() {
        let l = snapshot
            .lambda_max(id)
            .ok_or_else(|| TrainError::Config(format!("snapshot has no entry for module {id}")))?;
        ranked.push((id, l));
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite eigenvalues").then(a.0.cmp(&b.0)));
    let keep = ((keep_fraction * ranked.len() as f64).ceil() as usize).min(ranked.len());
    let kept: BTreeSet<ModuleId> = ranked[..keep].iter().map(|&(id, _)| id).collect();
    let pruned: BTreeSet<ModuleId> = ranked[keep..].iter().map(|&(id, _)| id).collect();
    if protect_per_layer {
        let layers: BTreeSet<usize> = ranked.iter().map(|(id, _)| id.layer).collect();
        for layer in layers {
            if !kept.iter().any(|id| id.layer == layer) {
                return Err(TrainError::Protection(format!("pruning would empty layer {layer}")));
            }
        }
    }
    net.prune(&pruned)?;
    Ok(pruned)
}

/// Architecture and data of the overfitting probe: 16 noisy teacher samples
/// against a network with thousands of parameters.
pub fn overfit_task() -> (Architecture, DatasetKind) {
    (
        Architecture::block_mlp(4, 4, 2, 64),
        DatasetKind::TeacherStudent {
            n_train: 16,
            n_val: 256,
            d_in: 4,
            teacher_width: 4,
            noise: 0.5,
        },
    )
}

/// Runs `cfg` on [`overfit_task`], seeded from `cfg.seed`.
pub fn overfit_probe<T: Scalar>(cfg: &TrainConfig) -> Result<RunResult<T>, TrainError> {
    let (arch, kind) = overfit_task();
    let data = generate_dataset::<T>(&kind, cfg.seed)?;
    let net = ModularNetwork::build(&arch, cfg.seed)?;
    train(net, &data, cfg)
}

#[cfg(test)]
mod tests;
