//! Small modular networks: exact forward evaluation, per-module Jacobians,
//! loss gradients and selective per-module SGD steps.
//!
//! A network owns one flat parameter vector. The *partition* maps each
//! [`ModuleId`] to the disjoint index ranges it owns; everything else
//! (embeddings, readout, feed-forward blocks) is shared and follows the
//! network's [`SharedRule`].

mod arch;
mod loss;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use arch::Architecture;
pub use loss::LossKind;

use crate::numerics::{Matrix, NumericsError};
use crate::scalar::Scalar;
use crate::tape::{FlopCount, Tape};
use arch::{Built, Layout};

/// Full-output Jacobians are capped at this many rows (`S · k`).
pub const MAX_FULL_OUTPUT_ROWS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown module {0}")]
    UnknownModule(ModuleId),
    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Module coordinates: layer, then head / block / filter group within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModuleId {
    pub layer: usize,
    pub slot: usize,
}

impl ModuleId {
    pub const fn new(layer: usize, slot: usize) -> Self {
        Self { layer, slot }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleFamily {
    Group,
    Block,
    Head,
    FilterGroup,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleSpec {
    pub id: ModuleId,
    pub family: ModuleFamily,
    pub ranges: Vec<Range<usize>>,
}

impl ModuleSpec {
    pub fn param_count(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }
}

/// Update rule for parameters outside every module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SharedRule {
    #[default]
    AlwaysActive,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scalarization {
    /// Gradient of the summed outputs: one Jacobian row per sample.
    #[default]
    SumOfLogits,
    /// One Jacobian row per (sample, output unit), sample-major.
    FullOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Matrix<T>,
    pub targets: Matrix<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Matrix<T>, targets: Matrix<T>) -> Result<Self, ModelError> {
        if inputs.rows() == 0 || inputs.rows() != targets.rows() {
            return Err(ModelError::Shape(format!(
                "batch with {} inputs and {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(indices),
            targets: self.targets.select_rows(indices),
        }
    }
}

/// `∂(scalarized output)/∂θ^l`, one row per sample (or sample × output).
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlock<T> {
    pub module: ModuleId,
    pub values: Matrix<T>,
    pub scalarization: Scalarization,
}

/// Jacobians of every live module from one sweep over the samples.
#[derive(Debug, Clone)]
pub struct JacobianSet<T> {
    pub blocks: Vec<JacobianBlock<T>>,
    /// Rows over all partitioned parameters in flat parameter order.
    pub full: Matrix<T>,
    /// Forward MACs of the sweep; the backward passes cost twice this.
    pub forward_flops: FlopCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub per_module: BTreeMap<ModuleId, Vec<T>>,
    /// Gradient of the shared parameters, concatenated in range order.
    pub shared: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGradients<T> {
    pub loss: T,
    pub gradients: Gradients<T>,
    /// `∇_Z ℒ`, shape `n × k`.
    pub output_grad: Matrix<T>,
    pub forward_flops: FlopCount,
    /// Accounting model: twice the forward cost of the same pass.
    pub backward_flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModularNetwork<T> {
    arch: Architecture,
    layout: Layout,
    modules: Vec<ModuleSpec>,
    shared: Vec<Range<usize>>,
    pruned: BTreeSet<ModuleId>,
    shared_rule: SharedRule,
    params: Vec<T>,
    theta0: Vec<T>,
}

/// Seeded construction; requires at least two modules.
pub fn build_network<T: Scalar>(arch: &Architecture, seed: u64) -> Result<ModularNetwork<T>, ModelError> {
    ModularNetwork::build(arch, seed)
}

impl<T: Scalar> ModularNetwork<T> {
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let built = arch::build_layout(arch);
        if built.modules.len() < 2 {
            return Err(ModelError::Spec(format!(
                "need at least 2 modules, got {}",
                built.modules.len()
            )));
        }
        let params = built.initialize::<T>(seed);
        Ok(Self::assemble(arch.clone(), built, params))
    }

    /// Network with explicit parameter values; any module count ≥ 1.
    pub fn with_parameters(arch: &Architecture, params: Vec<T>) -> Result<Self, ModelError> {
        arch.validate()?;
        let built = arch::build_layout(arch);
        if params.len() != built.len {
            return Err(ModelError::Shape(format!(
                "{} parameters given, architecture needs {}",
                params.len(),
                built.len
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::Spec("non-finite parameter".into()));
        }
        Ok(Self::assemble(arch.clone(), built, params))
    }

    fn assemble(arch: Architecture, built: Built, params: Vec<T>) -> Self {
        Self {
            arch,
            layout: built.layout,
            modules: built.modules,
            shared: built.shared,
            pruned: BTreeSet::new(),
            shared_rule: SharedRule::default(),
            theta0: params.clone(),
            params,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn parameters(&self) -> &[T] {
        &self.params
    }

    pub fn theta0(&self) -> &[T] {
        &self.theta0
    }

    pub fn shared_rule(&self) -> SharedRule {
        self.shared_rule
    }

    pub fn set_shared_rule(&mut self, rule: SharedRule) {
        self.shared_rule = rule;
    }

    /// Snapshots the current parameters as the reference point θ₀.
    pub fn reset_theta0(&mut self) {
        self.theta0.clone_from(&self.params);
    }

    /// Live modules (pruned ones excluded), sorted by id.
    pub fn modules(&self) -> impl Iterator<Item = &ModuleSpec> {
        self.modules.iter().filter(|m| !self.pruned.contains(&m.id))
    }

    pub fn module_ids(&self) -> Vec<ModuleId> {
        self.modules().map(|m| m.id).collect()
    }

    pub fn module_count(&self) -> usize {
        self.modules().count()
    }

    pub fn module(&self, id: ModuleId) -> Result<&ModuleSpec, ModelError> {
        self.modules()
            .find(|m| m.id == id)
            .ok_or(ModelError::UnknownModule(id))
    }

    pub fn pruned(&self) -> &BTreeSet<ModuleId> {
        &self.pruned
    }

    pub fn shared_ranges(&self) -> &[Range<usize>] {
        &self.shared
    }

    pub fn shared_param_count(&self) -> usize {
        self.shared.iter().map(|r| r.len()).sum()
    }

    pub fn modular_param_count(&self) -> usize {
        self.modules().map(ModuleSpec::param_count).sum()
    }

    pub fn module_parameters(&self, id: ModuleId) -> Result<Vec<T>, ModelError> {
        Ok(gather(&self.params, &self.module(id)?.ranges))
    }

    /// `‖θ − θ₀‖_F` over all parameters.
    pub fn weight_distance(&self) -> T {
        crate::numerics::vector_distance(&self.params, &self.theta0)
    }

    pub fn module_weight_distance(&self, id: ModuleId) -> Result<T, ModelError> {
        let ranges = &self.module(id)?.ranges;
        Ok(crate::numerics::vector_distance(
            &gather(&self.params, ranges),
            &gather(&self.theta0, ranges),
        ))
    }

    /// Removes modules from forward and backward; their outputs become zero.
    pub fn prune(&mut self, ids: &BTreeSet<ModuleId>) -> Result<(), ModelError> {
        for &id in ids {
            self.module(id)?;
        }
        self.pruned.extend(ids.iter().copied());
        Ok(())
    }

    fn check_width(&self, inputs: &Matrix<T>) -> Result<(), ModelError> {
        if inputs.cols() != self.arch.input_dim() {
            return Err(ModelError::Shape(format!(
                "input width {} but architecture expects {}",
                inputs.cols(),
                self.arch.input_dim()
            )));
        }
        Ok(())
    }

    fn record<'p>(&'p self, tape: &mut Tape<'p, T>, input: &[T]) -> crate::tape::Var {
        let pruned = |id: ModuleId| self.pruned.contains(&id);
        self.layout.forward_sample(&self.arch, tape, input, &pruned)
    }

    /// Outputs `n × k` and the multiply-accumulate count of the pass.
    pub fn forward(&self, inputs: &Matrix<T>) -> Result<(Matrix<T>, FlopCount), ModelError> {
        self.check_width(inputs)?;
        let k = self.arch.output_dim();
        let mut out = Matrix::zeros(inputs.rows(), k);
        let mut flops = FlopCount::default();
        for i in 0..inputs.rows() {
            let mut tape = Tape::new(&self.params);
            let z = self.record(&mut tape, inputs.row(i));
            out.row_mut(i).copy_from_slice(tape.value(z).as_slice());
            flops.add(tape.flops());
        }
        Ok((out, flops))
    }

    /// Forward MACs of a single sample (independent of its values).
    pub fn sample_flops(&self) -> FlopCount {
        let zeros = vec![T::zero(); self.arch.input_dim()];
        let mut tape = Tape::new(&self.params);
        self.record(&mut tape, &zeros);
        tape.flops()
    }

    fn seeds(&self, shape: (usize, usize), scalarization: Scalarization) -> Vec<Matrix<T>> {
        match scalarization {
            Scalarization::SumOfLogits => vec![Matrix::filled(shape.0, shape.1, T::one())],
            Scalarization::FullOutput => (0..shape.0 * shape.1)
                .map(|j| {
                    let mut m = Matrix::zeros(shape.0, shape.1);
                    m.as_mut_slice()[j] = T::one();
                    m
                })
                .collect(),
        }
    }

    /// Jacobians of every live module in one sweep over `samples`.
    pub fn jacobians(
        &self,
        samples: &Matrix<T>,
        scalarization: Scalarization,
    ) -> Result<JacobianSet<T>, ModelError> {
        self.check_width(samples)?;
        if samples.rows() < 2 {
            return Err(ModelError::Shape("need at least 2 samples".into()));
        }
        let per_sample = match scalarization {
            Scalarization::SumOfLogits => 1,
            Scalarization::FullOutput => self.arch.output_dim(),
        };
        let rows = samples.rows() * per_sample;
        if scalarization == Scalarization::FullOutput && rows > MAX_FULL_OUTPUT_ROWS {
            return Err(ModelError::Spec(format!(
                "full-output Jacobian needs {rows} rows, cap is {MAX_FULL_OUTPUT_ROWS}"
            )));
        }
        let live: Vec<&ModuleSpec> = self.modules().collect();
        let mut partitioned: Vec<Range<usize>> = live.iter().flat_map(|m| m.ranges.iter().cloned()).collect();
        partitioned.sort_by_key(|r| r.start);
        let full_cols: usize = partitioned.iter().map(|r| r.len()).sum();

        let mut blocks: Vec<Matrix<T>> = live.iter().map(|m| Matrix::zeros(rows, m.param_count())).collect();
        let mut full = Matrix::zeros(rows, full_cols);
        let mut flops = FlopCount::default();
        let mut grad = vec![T::zero(); self.params.len()];
        let mut row = 0;
        for i in 0..samples.rows() {
            let mut tape = Tape::new(&self.params);
            let z = self.record(&mut tape, samples.row(i));
            flops.add(tape.flops());
            for seed in self.seeds(tape.value(z).shape(), scalarization) {
                grad.iter_mut().for_each(|g| *g = T::zero());
                tape.backward(z, seed, &mut grad);
                for (m, block) in live.iter().zip(blocks.iter_mut()) {
                    block.row_mut(row).copy_from_slice(&gather(&grad, &m.ranges));
                }
                full.row_mut(row).copy_from_slice(&gather(&grad, &partitioned));
                row += 1;
            }
        }
        Ok(JacobianSet {
            blocks: live
                .iter()
                .zip(blocks)
                .map(|(m, values)| JacobianBlock {
                    module: m.id,
                    values,
                    scalarization,
                })
                .collect(),
            full,
            forward_flops: flops,
        })
    }

    pub fn module_jacobian(
        &self,
        samples: &Matrix<T>,
        module: ModuleId,
        scalarization: Scalarization,
    ) -> Result<JacobianBlock<T>, ModelError> {
        self.module(module)?;
        let set = self.jacobians(samples, scalarization)?;
        Ok(set
            .blocks
            .into_iter()
            .find(|b| b.module == module)
            .expect("live module has a block"))
    }

    pub fn loss(&self, batch: &Batch<T>, kind: LossKind) -> Result<T, ModelError> {
        let (out, _) = self.forward(&batch.inputs)?;
        Ok(loss::evaluate(kind, &out, &batch.targets, self.arch.class_group())?.0)
    }

    pub fn loss_and_gradients(
        &self,
        batch: &Batch<T>,
        kind: LossKind,
    ) -> Result<LossAndGradients<T>, ModelError> {
        self.check_width(&batch.inputs)?;
        if batch.targets.cols() != self.arch.output_dim() {
            return Err(ModelError::Shape(format!(
                "target width {} but network outputs {}",
                batch.targets.cols(),
                self.arch.output_dim()
            )));
        }
        let mut tapes = Vec::with_capacity(batch.len());
        let mut out = Matrix::zeros(batch.len(), self.arch.output_dim());
        let mut flops = FlopCount::default();
        for i in 0..batch.len() {
            let mut tape = Tape::new(&self.params);
            let z = self.record(&mut tape, batch.inputs.row(i));
            out.row_mut(i).copy_from_slice(tape.value(z).as_slice());
            flops.add(tape.flops());
            tapes.push((tape, z));
        }
        let (value, output_grad) = loss::evaluate(kind, &out, &batch.targets, self.arch.class_group())?;
        let mut grad = vec![T::zero(); self.params.len()];
        for (i, (tape, z)) in tapes.iter().enumerate() {
            let shape = tape.value(*z).shape();
            let seed = Matrix::from_vec_unchecked(shape.0, shape.1, output_grad.row(i).to_vec());
            tape.backward(*z, seed, &mut grad);
        }
        let per_module = self.modules().map(|m| (m.id, gather(&grad, &m.ranges))).collect();
        Ok(LossAndGradients {
            loss: value,
            gradients: Gradients {
                per_module,
                shared: gather(&grad, &self.shared),
            },
            output_grad,
            forward_flops: flops,
            backward_flops: 2 * flops.total(),
        })
    }

    /// SGD step on the `active` modules (plus shared parameters when they are
    /// always active). Inactive module parameters are left bit-for-bit intact.
    pub fn apply_selective_step(
        &mut self,
        grads: &Gradients<T>,
        active: &BTreeSet<ModuleId>,
        lr: T,
    ) -> Result<(), ModelError> {
        let rates = active.iter().map(|&id| (id, lr)).collect();
        self.apply_rates(grads, &rates, lr)
    }

    /// SGD step with one step size per module; modules absent from `rates`
    /// are not touched. `shared_lr` applies unless shared parameters are frozen.
    pub fn apply_rates(
        &mut self,
        grads: &Gradients<T>,
        rates: &BTreeMap<ModuleId, T>,
        shared_lr: T,
    ) -> Result<(), ModelError> {
        if grads.shared.len() != self.shared_param_count() {
            return Err(ModelError::Shape(format!(
                "shared gradient has {} entries, expected {}",
                grads.shared.len(),
                self.shared_param_count()
            )));
        }
        let mut plan = Vec::with_capacity(rates.len());
        for (&id, &lr) in rates {
            let spec = self.module(id)?;
            let g = grads.per_module.get(&id).ok_or(ModelError::UnknownModule(id))?;
            if g.len() != spec.param_count() {
                return Err(ModelError::Shape(format!(
                    "module {id} gradient has {} entries, expected {}",
                    g.len(),
                    spec.param_count()
                )));
            }
            plan.push((spec.ranges.clone(), g, lr));
        }
        for (ranges, g, lr) in plan {
            descend(&mut self.params, &ranges, g, lr);
        }
        if self.shared_rule == SharedRule::AlwaysActive {
            let shared = self.shared.clone();
            descend(&mut self.params, &shared, &grads.shared, shared_lr);
        }
        Ok(())
    }
}

fn gather<T: Copy>(values: &[T], ranges: &[Range<usize>]) -> Vec<T> {
    ranges.iter().flat_map(|r| values[r.clone()].iter().copied()).collect()
}

fn descend<T: Scalar>(params: &mut [T], ranges: &[Range<usize>], grad: &[T], lr: T) {
    let targets = ranges.iter().flat_map(|r| r.clone());
    for (i, &g) in targets.zip(grad) {
        params[i] = params[i] - lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> ModularNetwork<f64> {
        ModularNetwork::build(&Architecture::block_mlp(3, 2, 2, 4), 7).unwrap()
    }

    fn inputs(n: usize, d: usize) -> Matrix<f64> {
        let data = (0..n * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        Matrix::new(n, d, data).unwrap()
    }

    #[test]
    fn single_linear_module_forward() {
        let arch = Architecture::Linear { d_in: 1, d_out: 1, groups: 1 };
        let net = ModularNetwork::with_parameters(&arch, vec![2.0]).unwrap();
        let (out, _) = net.forward(&Matrix::from_rows(&[vec![3.0]]).unwrap()).unwrap();
        assert_eq!(out.as_slice(), &[6.0]);
        assert!(matches!(
            ModularNetwork::<f64>::build(&arch, 0),
            Err(ModelError::Spec(_))
        ));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        assert!(matches!(mlp().forward(&inputs(2, 4)), Err(ModelError::Shape(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let arch = Architecture::tiny_attention(8, 2, 2);
        let a = ModularNetwork::<f64>::build(&arch, 3).unwrap();
        let b = ModularNetwork::<f64>::build(&arch, 3).unwrap();
        let c = ModularNetwork::<f64>::build(&arch, 4).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters(), c.parameters());
        assert_eq!(a.module_count(), 4);
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        for arch in [
            Architecture::block_mlp(3, 2, 2, 4),
            Architecture::tiny_attention(8, 2, 2),
            Architecture::tiny_conv(6, 2, 4, 2, 2),
        ] {
            let net = ModularNetwork::<f64>::build(&arch, 1).unwrap();
            let mut owner = vec![0u8; net.parameters().len()];
            for r in net.modules().flat_map(|m| m.ranges.iter()).chain(net.shared_ranges()) {
                for i in r.clone() {
                    owner[i] += 1;
                }
            }
            assert!(owner.iter().all(|&c| c == 1), "{}", arch.name());
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let net = mlp();
        let x = inputs(3, 3);
        let id = net.module_ids()[1];
        let jac = net.module_jacobian(&x, id, Scalarization::SumOfLogits).unwrap();
        let ranges = net.module(id).unwrap().ranges.clone();
        let h = 1e-6;
        for (col, p) in ranges.iter().flat_map(|r| r.clone()).enumerate() {
            let mut plus = net.parameters().to_vec();
            let mut minus = plus.clone();
            plus[p] += h;
            minus[p] -= h;
            let fp = ModularNetwork::with_parameters(net.architecture(), plus).unwrap();
            let fm = ModularNetwork::with_parameters(net.architecture(), minus).unwrap();
            let (op, _) = fp.forward(&x).unwrap();
            let (om, _) = fm.forward(&x).unwrap();
            for s in 0..3 {
                let fd = (op.row(s).iter().sum::<f64>() - om.row(s).iter().sum::<f64>()) / (2.0 * h);
                assert!((jac.values[(s, col)] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_output_rows_are_sample_major() {
        let arch = Architecture::BlockMlp { d_in: 2, width: 2, blocks_per_layer: 2, layers: 1, d_out: 3, bias: true };
        let net = ModularNetwork::<f64>::build(&arch, 2).unwrap();
        let x = inputs(2, 2);
        let full = net.jacobians(&x, Scalarization::FullOutput).unwrap();
        let sum = net.jacobians(&x, Scalarization::SumOfLogits).unwrap();
        assert_eq!(full.blocks[0].values.rows(), 6);
        for s in 0..2 {
            for c in 0..full.blocks[0].values.cols() {
                let total: f64 = (0..3).map(|j| full.blocks[0].values[(s * 3 + j, c)]).sum();
                assert!((total - sum.blocks[0].values[(s, c)]).abs() < 1e-12);
            }
        }
        assert!(net.jacobians(&inputs(1, 2), Scalarization::SumOfLogits).is_err());
    }

    #[test]
    fn full_output_cap_enforced() {
        let arch = Architecture::BlockMlp { d_in: 2, width: 2, blocks_per_layer: 2, layers: 1, d_out: 9, bias: false };
        let net = ModularNetwork::<f64>::build(&arch, 2).unwrap();
        assert!(matches!(
            net.jacobians(&inputs(57, 2), Scalarization::FullOutput),
            Err(ModelError::Spec(_))
        ));
    }

    #[test]
    fn selective_step_touches_only_active() {
        let mut net = mlp();
        let x = inputs(4, 3);
        let batch = Batch::new(x, Matrix::filled(4, 1, 0.5)).unwrap();
        let lg = net.loss_and_gradients(&batch, LossKind::SquaredError).unwrap();
        let ids = net.module_ids();
        let frozen: Vec<_> = ids[1..].iter().map(|&id| net.module_parameters(id).unwrap()).collect();
        let before = net.module_parameters(ids[0]).unwrap();
        let active = BTreeSet::from([ids[0]]);
        net.apply_selective_step(&lg.gradients, &active, 0.1).unwrap();
        for (id, old) in ids[1..].iter().zip(frozen) {
            assert_eq!(net.module_parameters(*id).unwrap(), old);
        }
        assert_ne!(net.module_parameters(ids[0]).unwrap(), before);
        let bogus = BTreeSet::from([ModuleId::new(9, 9)]);
        assert!(matches!(
            net.apply_selective_step(&lg.gradients, &bogus, 0.1),
            Err(ModelError::UnknownModule(_))
        ));
    }

    #[test]
    fn frozen_shared_rule_holds_shared_parameters() {
        let mut net = mlp();
        net.set_shared_rule(SharedRule::Frozen);
        let batch = Batch::new(inputs(4, 3), Matrix::filled(4, 1, 1.0)).unwrap();
        let lg = net.loss_and_gradients(&batch, LossKind::SquaredError).unwrap();
        let shared_before = gather(net.parameters(), net.shared_ranges());
        let all: BTreeSet<_> = net.module_ids().into_iter().collect();
        net.apply_selective_step(&lg.gradients, &all, 0.1).unwrap();
        assert_eq!(gather(net.parameters(), net.shared_ranges()), shared_before);
    }

    #[test]
    fn pruned_module_contributes_nothing() {
        let mut net = mlp();
        let x = inputs(3, 3);
        let id = net.module_ids()[0];
        let mut zeroed = net.parameters().to_vec();
        for r in &net.module(id).unwrap().ranges {
            zeroed[r.clone()].iter_mut().for_each(|v| *v = 0.0);
        }
        let reference = ModularNetwork::with_parameters(net.architecture(), zeroed).unwrap();
        net.prune(&BTreeSet::from([id])).unwrap();
        assert_eq!(net.module_count(), 3);
        let (a, _) = net.forward(&x).unwrap();
        let (b, _) = reference.forward(&x).unwrap();
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_distance_tracks_theta0() {
        let mut net = mlp();
        assert_eq!(net.weight_distance(), 0.0);
        let batch = Batch::new(inputs(4, 3), Matrix::filled(4, 1, 1.0)).unwrap();
        let lg = net.loss_and_gradients(&batch, LossKind::SquaredError).unwrap();
        let all: BTreeSet<_> = net.module_ids().into_iter().collect();
        net.apply_selective_step(&lg.gradients, &all, 0.1).unwrap();
        assert!(net.weight_distance() > 0.0);
        net.reset_theta0();
        assert_eq!(net.weight_distance(), 0.0);
    }
}
