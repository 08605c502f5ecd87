//! Information / nuisance decisions: eigenvalue threshold, temporal early
//! stop and per-layer protection.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mntk::{SpectrumSnapshot, DEFAULT_SAMPLES};
use crate::modelzoo::{ModuleFamily, ModuleId};
use crate::scalar::Scalar;

/// A first variation at or below this is treated as "never moved".
pub const DELTA_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("threshold ordering error: pooled max {max} < pooled min {min}")]
    Ordering { min: f64, max: f64 },
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error("no baseline eigenvalue recorded for module {0}")]
    State(ModuleId),
}

/// `(α, β)` for one module family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub alpha: f64,
    pub beta: f64,
    pub samples: usize,
    /// Epochs of full training before the first snapshot.
    pub warmup: usize,
    /// Epochs per policy episode.
    pub cadence: usize,
    pub sticky: bool,
    pub protect_per_layer: bool,
    pub temporal_enabled: bool,
    /// Per-family replacements for `(alpha, beta)`.
    pub families: BTreeMap<ModuleFamily, Thresholds>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1e-3,
            samples: DEFAULT_SAMPLES,
            warmup: 5,
            cadence: 8,
            sticky: true,
            protect_per_layer: true,
            temporal_enabled: true,
            families: BTreeMap::new(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let mut pairs = vec![Thresholds { alpha: self.alpha, beta: self.beta }];
        pairs.extend(self.families.values().copied());
        for t in pairs {
            if !(t.alpha > 0.0 && t.alpha < 1.0) {
                return Err(PolicyError::Config(format!("alpha must be in (0, 1), got {}", t.alpha)));
            }
            if !(t.beta > 0.0 && t.beta.is_finite()) {
                return Err(PolicyError::Config(format!("beta must be positive, got {}", t.beta)));
            }
        }
        if self.samples < 2 {
            return Err(PolicyError::Config(format!("samples must be >= 2, got {}", self.samples)));
        }
        if self.cadence == 0 {
            return Err(PolicyError::Config("cadence must be >= 1".into()));
        }
        Ok(())
    }

    pub fn thresholds(&self, family: ModuleFamily) -> Thresholds {
        self.families.get(&family).copied().unwrap_or(Thresholds {
            alpha: self.alpha,
            beta: self.beta,
        })
    }
}

/// `λ_α = λ̃_min + (λ̃_max − λ̃_min)·α`.
pub fn eigen_threshold<T: Scalar>(pooled_min: T, pooled_max: T, alpha: T) -> Result<T, PolicyError> {
    if pooled_max < pooled_min {
        return Err(PolicyError::Ordering {
            min: pooled_min.as_f64(),
            max: pooled_max.as_f64(),
        });
    }
    // clamp keeps rounding inside [min, max]
    Ok((pooled_min + (pooled_max - pooled_min) * alpha).max(pooled_min).min(pooled_max))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ModuleSets {
    pub information: BTreeSet<ModuleId>,
    pub nuisance: BTreeSet<ModuleId>,
}

impl ModuleSets {
    pub fn all_information(ids: impl IntoIterator<Item = ModuleId>) -> Self {
        Self {
            information: ids.into_iter().collect(),
            nuisance: BTreeSet::new(),
        }
    }

    /// Training stops once no module is left to update.
    pub fn halted(&self) -> bool {
        self.information.is_empty()
    }

    fn demote(&mut self, id: ModuleId) {
        if self.information.remove(&id) {
            self.nuisance.insert(id);
        }
    }

    fn promote(&mut self, id: ModuleId) {
        if self.nuisance.remove(&id) {
            self.information.insert(id);
        }
    }
}

/// Information iff `λ_max ≥ λ_α`.
pub fn modular_split<T: Scalar>(snapshot: &SpectrumSnapshot<T>, lambda_alpha: T) -> ModuleSets {
    let mut sets = ModuleSets::default();
    for (&id, s) in &snapshot.per_module {
        if s.lambda_max >= lambda_alpha {
            sets.information.insert(id);
        } else {
            sets.nuisance.insert(id);
        }
    }
    sets
}

/// `|Δ_t − Δ_{t−1}| / Δ_1 < β`, true outright when `Δ_1 ≤ DELTA_GUARD`.
pub fn temporal_criterion<T: Scalar>(delta_first: T, delta_prev: T, delta_now: T, beta: T) -> bool {
    if delta_first <= T::lit(DELTA_GUARD) {
        return true;
    }
    (delta_now - delta_prev).abs() / delta_first < beta
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyState<T> {
    pub lambda0: BTreeMap<ModuleId, T>,
    pub delta_prev: BTreeMap<ModuleId, T>,
    pub delta_first: BTreeMap<ModuleId, T>,
    pub stopped: BTreeSet<ModuleId>,
    /// Number of completed `decide` calls.
    pub episode: usize,
}

impl<T> Default for PolicyState<T> {
    fn default() -> Self {
        Self {
            lambda0: BTreeMap::new(),
            delta_prev: BTreeMap::new(),
            delta_first: BTreeMap::new(),
            stopped: BTreeSet::new(),
            episode: 0,
        }
    }
}

impl<T: Scalar> PolicyState<T> {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Records `Δ_t` for `module` and evaluates the temporal criterion. Returns
/// false until both `Δ_1` and `Δ_{t−1}` exist.
pub fn temporal_stop<T: Scalar>(
    module: ModuleId,
    lambda_now: T,
    state: &mut PolicyState<T>,
    beta: T,
) -> Result<bool, PolicyError> {
    let base = *state.lambda0.get(&module).ok_or(PolicyError::State(module))?;
    let delta = (lambda_now - base).abs();
    let Some(&first) = state.delta_first.get(&module) else {
        state.delta_first.insert(module, delta);
        state.delta_prev.insert(module, delta);
        return Ok(false);
    };
    let prev = state.delta_prev.insert(module, delta).unwrap_or(first);
    Ok(temporal_criterion(first, prev, delta, beta))
}

/// One policy episode. The first call records the λ_max baseline and applies
/// only the eigenvalue threshold.
pub fn decide<T: Scalar>(
    snapshot: &SpectrumSnapshot<T>,
    state: &mut PolicyState<T>,
    cfg: &PolicyConfig,
) -> Result<ModuleSets, PolicyError> {
    let first_episode = state.lambda0.is_empty();
    if first_episode {
        state.lambda0 = snapshot
            .per_module
            .iter()
            .map(|(&id, s)| (id, s.lambda_max))
            .collect();
    }

    // eigenvalues are pooled within each family so that each family's α
    // applies to its own spectrum scale
    let mut pooled: BTreeMap<ModuleFamily, (T, T)> = BTreeMap::new();
    for s in snapshot.per_module.values() {
        let e = pooled.entry(s.family).or_insert((T::infinity(), T::neg_infinity()));
        for &v in &s.eigenvalues {
            e.0 = e.0.min(v);
            e.1 = e.1.max(v);
        }
    }
    let mut sets = ModuleSets::default();
    for (&id, s) in &snapshot.per_module {
        let t = cfg.thresholds(s.family);
        let (lo, hi) = pooled[&s.family];
        let lambda_alpha = eigen_threshold(lo, hi, T::lit(t.alpha))?;
        if s.lambda_max >= lambda_alpha {
            sets.information.insert(id);
        } else {
            sets.nuisance.insert(id);
        }
    }

    if !first_episode {
        for (&id, s) in &snapshot.per_module {
            let beta = T::lit(cfg.thresholds(s.family).beta);
            let stop = temporal_stop(id, s.lambda_max, state, beta)?;
            if cfg.temporal_enabled && stop {
                sets.demote(id);
                if cfg.sticky {
                    state.stopped.insert(id);
                }
            }
        }
        if cfg.sticky {
            for &id in &state.stopped {
                sets.demote(id);
            }
        }
    }

    if cfg.protect_per_layer {
        protect(snapshot, &mut sets);
    }
    state.episode += 1;
    Ok(sets)
}

/// Moves each layer's highest-λ_max module back into information when the
/// layer has none. Ties go to the lowest module id.
fn protect<T: Scalar>(snapshot: &SpectrumSnapshot<T>, sets: &mut ModuleSets) {
    let mut best: BTreeMap<usize, (ModuleId, T)> = BTreeMap::new();
    let mut covered = BTreeSet::new();
    for (&id, s) in &snapshot.per_module {
        if sets.information.contains(&id) {
            covered.insert(id.layer);
        }
        match best.get(&id.layer) {
            Some(&(_, l)) if l >= s.lambda_max => {}
            _ => {
                best.insert(id.layer, (id, s.lambda_max));
            }
        }
    }
    for (layer, (id, _)) in best {
        if !covered.contains(&layer) {
            sets.promote(id);
        }
    }
}
