use serde::Serialize;

use crate::mntk::Condition;
use crate::modelzoo::ModuleId;
use crate::scalar::Scalar;

/// Multiply-accumulate totals. Backward cost follows the accounting model
/// `2·F_mod·(updated modular parameter fraction) + 2·F_shared` per step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FlopsLedger {
    pub forward_total: u64,
    pub forward_modular: u64,
    pub backward_modular: u64,
    pub backward_shared: u64,
    pub backward_total: u64,
    pub ntk_overhead: u64,
    pub per_epoch: Vec<EpochFlops>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EpochFlops {
    pub epoch: usize,
    pub forward: u64,
    pub forward_modular: u64,
    pub backward_modular: u64,
    pub backward_shared: u64,
    pub ntk: u64,
}

impl EpochFlops {
    pub fn backward(&self) -> u64 {
        self.backward_modular + self.backward_shared
    }
}

impl FlopsLedger {
    pub fn total(&self) -> u64 {
        self.forward_total + self.backward_total + self.ntk_overhead
    }

    /// `ntk_overhead / total`.
    pub fn overhead_ratio(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.ntk_overhead as f64 / t as f64,
        }
    }

    pub(crate) fn push(&mut self, epoch: EpochFlops) {
        self.forward_total += epoch.forward;
        self.forward_modular += epoch.forward_modular;
        self.backward_modular += epoch.backward_modular;
        self.backward_shared += epoch.backward_shared;
        self.backward_total += epoch.backward();
        self.ntk_overhead += epoch.ntk;
        self.per_epoch.push(epoch);
    }
}

/// Either one module or the whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowScope {
    Global,
    Module(ModuleId),
}

/// One line of the metric stream. Module rows appear at snapshot epochs;
/// one global row closes every epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub scope: RowScope,
    pub lambda_max: Option<f64>,
    pub lambda_min: Option<f64>,
    pub effective_rank: Option<f64>,
    /// `f64::INFINITY` for rank-deficient spectra.
    pub condition_number: Option<f64>,
    pub in_information: Option<bool>,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub weight_distance: f64,
    pub flops_forward: u64,
    pub flops_backward: u64,
    pub flops_ntk: u64,
}

impl MetricRow {
    pub(crate) fn blank(epoch: usize, scope: RowScope, weight_distance: f64) -> Self {
        Self {
            epoch,
            scope,
            lambda_max: None,
            lambda_min: None,
            effective_rank: None,
            condition_number: None,
            in_information: None,
            train_loss: None,
            val_loss: None,
            weight_distance,
            flops_forward: 0,
            flops_backward: 0,
            flops_ntk: 0,
        }
    }
}

pub(crate) fn condition_f64<T: Scalar>(c: Condition<T>) -> f64 {
    c.value().map_or(f64::INFINITY, Scalar::as_f64)
}
