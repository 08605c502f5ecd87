use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::mntk::SpectrumSnapshot;
use crate::modelzoo::{ModularNetwork, ModuleId};
use crate::policy::{decide, ModuleSets, PolicyConfig, PolicyState};
use crate::scalar::Scalar;

/// Modules to train for one epoch, or the signal to stop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EpochPlan {
    Train(BTreeSet<ModuleId>),
    Halt,
}

/// Chooses which modules are updated, epoch by epoch and step by step.
pub trait Schedule<T: Scalar> {
    /// Whether the trainer must pay for spectrum snapshots at episode boundaries.
    fn needs_snapshots(&self) -> bool {
        false
    }

    /// `snapshot` is present only at episode boundaries.
    fn plan(
        &mut self,
        epoch: usize,
        net: &ModularNetwork<T>,
        snapshot: Option<&SpectrumSnapshot<T>>,
    ) -> Result<EpochPlan, TrainError>;

    /// Step size per updated module at global step `step`.
    fn rates(&mut self, _step: usize, active: &BTreeSet<ModuleId>, lr: T) -> BTreeMap<ModuleId, T> {
        active.iter().map(|&id| (id, lr)).collect()
    }
}

/// Every module, every step.
#[derive(Debug, Clone, Default)]
pub struct VanillaSchedule;

impl<T: Scalar> Schedule<T> for VanillaSchedule {
    fn plan(&mut self, _: usize, net: &ModularNetwork<T>, _: Option<&SpectrumSnapshot<T>>) -> Result<EpochPlan, TrainError> {
        Ok(EpochPlan::Train(net.module_ids().into_iter().collect()))
    }
}

/// A fresh random `⌈fraction·L⌉` modules each epoch.
#[derive(Debug, Clone)]
pub struct RandSchedule {
    fraction: f64,
    protect: bool,
    rng: ChaCha8Rng,
}

impl RandSchedule {
    pub fn new(fraction: f64, protect: bool, rng: ChaCha8Rng) -> Self {
        Self { fraction, protect, rng }
    }
}

impl<T: Scalar> Schedule<T> for RandSchedule {
    fn plan(&mut self, _: usize, net: &ModularNetwork<T>, _: Option<&SpectrumSnapshot<T>>) -> Result<EpochPlan, TrainError> {
        let ids = net.module_ids();
        let k = ((self.fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len());
        let mut chosen: BTreeSet<ModuleId> = index::sample(&mut self.rng, ids.len(), k)
            .into_iter()
            .map(|i| ids[i])
            .collect();
        if self.protect {
            let mut layers: BTreeMap<usize, Vec<ModuleId>> = BTreeMap::new();
            for &id in &ids {
                layers.entry(id.layer).or_default().push(id);
            }
            for members in layers.values() {
                if !members.iter().any(|id| chosen.contains(id)) {
                    chosen.insert(members[self.rng.random_range(0..members.len())]);
                }
            }
        }
        Ok(EpochPlan::Train(chosen))
    }
}

/// Seeded slow/fast split; slow modules step every `k` steps with step size `k·η`.
#[derive(Debug, Clone)]
pub struct MultirateSchedule {
    fraction_slow: f64,
    k: usize,
    rng: ChaCha8Rng,
    slow: Option<BTreeSet<ModuleId>>,
}

impl MultirateSchedule {
    pub fn new(fraction_slow: f64, k: usize, rng: ChaCha8Rng) -> Self {
        Self { fraction_slow, k, rng, slow: None }
    }

    pub fn slow_modules(&self) -> Option<&BTreeSet<ModuleId>> {
        self.slow.as_ref()
    }
}

impl<T: Scalar> Schedule<T> for MultirateSchedule {
    fn plan(&mut self, _: usize, net: &ModularNetwork<T>, _: Option<&SpectrumSnapshot<T>>) -> Result<EpochPlan, TrainError> {
        let ids = net.module_ids();
        if self.slow.is_none() {
            let mut order = ids.clone();
            order.shuffle(&mut self.rng);
            let n_slow = (self.fraction_slow * ids.len() as f64).round() as usize;
            self.slow = Some(order.into_iter().take(n_slow).collect());
        }
        Ok(EpochPlan::Train(ids.into_iter().collect()))
    }

    fn rates(&mut self, step: usize, active: &BTreeSet<ModuleId>, lr: T) -> BTreeMap<ModuleId, T> {
        let slow = self.slow.as_ref().expect("plan runs before rates");
        let slow_step = (step + 1).is_multiple_of(self.k);
        let slow_lr = lr * T::from_count(self.k);
        active
            .iter()
            .filter_map(|&id| match (slow.contains(&id), slow_step) {
                (false, _) => Some((id, lr)),
                (true, true) => Some((id, slow_lr)),
                (true, false) => None,
            })
            .collect()
    }
}

/// Information set from the spectrum policy; all modules during warmup.
#[derive(Debug, Clone)]
pub struct MatSchedule<T> {
    cfg: PolicyConfig,
    state: PolicyState<T>,
    current: Option<BTreeSet<ModuleId>>,
    decisions: Vec<(usize, ModuleSets)>,
}

impl<T: Scalar> MatSchedule<T> {
    pub fn new(cfg: PolicyConfig) -> Self {
        Self {
            cfg,
            state: PolicyState::new(),
            current: None,
            decisions: Vec::new(),
        }
    }

    pub fn state(&self) -> &PolicyState<T> {
        &self.state
    }

    /// `(epoch, sets)` for every policy episode so far.
    pub fn decisions(&self) -> &[(usize, ModuleSets)] {
        &self.decisions
    }
}

impl<T: Scalar> Schedule<T> for MatSchedule<T> {
    fn needs_snapshots(&self) -> bool {
        true
    }

    fn plan(
        &mut self,
        epoch: usize,
        net: &ModularNetwork<T>,
        snapshot: Option<&SpectrumSnapshot<T>>,
    ) -> Result<EpochPlan, TrainError> {
        if let Some(snap) = snapshot {
            let sets = decide(snap, &mut self.state, &self.cfg)?;
            log::debug!(
                "epoch {epoch}: {} information, {} nuisance",
                sets.information.len(),
                sets.nuisance.len()
            );
            self.current = Some(sets.information.clone());
            self.decisions.push((epoch, sets));
        }
        Ok(match &self.current {
            None => EpochPlan::Train(net.module_ids().into_iter().collect()),
            Some(info) if info.is_empty() => EpochPlan::Halt,
            Some(info) => EpochPlan::Train(info.clone()),
        })
    }
}

/// Replays a fixed plan per epoch; the last entry repeats.
#[derive(Debug, Clone)]
pub struct ScriptedSchedule {
    plans: Vec<EpochPlan>,
}

impl ScriptedSchedule {
    pub fn new(plans: Vec<EpochPlan>) -> Self {
        Self { plans }
    }
}

impl<T: Scalar> Schedule<T> for ScriptedSchedule {
    fn plan(&mut self, epoch: usize, _: &ModularNetwork<T>, _: Option<&SpectrumSnapshot<T>>) -> Result<EpochPlan, TrainError> {
        self.plans
            .get(epoch)
            .or(self.plans.last())
            .cloned()
            .ok_or_else(|| TrainError::Config("empty script".into()))
    }
}

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
