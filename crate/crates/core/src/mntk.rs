//! Per-module NTK Gram matrices, their spectra and per-episode snapshots.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::modelzoo::{JacobianBlock, ModelError, ModularNetwork, ModuleFamily, ModuleId, Scalarization};
use crate::numerics::{self, eig_psd, matmul_transpose, Matrix, NumericsError, Spectrum};
use crate::scalar::Scalar;

/// Default number of sampled inputs per snapshot.
pub const DEFAULT_SAMPLES: usize = 64;

/// Eigenvalues at or below this fraction of λ_max are excluded from κ.
pub const CONDITION_CUTOFF: f64 = 1e-10;

const JACOBI_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MntkError {
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `λ_max / λ_min` over eigenvalues above the cutoff, or a rank-deficient flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition<T> {
    Finite(T),
    Infinite,
}

impl<T: Scalar> Condition<T> {
    pub fn value(&self) -> Option<T> {
        match *self {
            Condition::Finite(v) => Some(v),
            Condition::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Condition::Infinite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mntk<T> {
    pub module: ModuleId,
    pub gram: Matrix<T>,
    pub spectrum: Spectrum<T>,
    pub trace: T,
    pub condition: Condition<T>,
}

impl<T: Scalar> Mntk<T> {
    pub fn lambda_max(&self) -> T {
        self.spectrum.lambda_max()
    }
}

/// Condition number of a descending PSD spectrum. Rank deficiency (any
/// eigenvalue at or below the cutoff) is reported as [`Condition::Infinite`].
pub fn condition_number<T: Scalar>(eigenvalues: &[T]) -> Condition<T> {
    let Some(&top) = eigenvalues.first() else {
        return Condition::Infinite;
    };
    let cutoff = top * T::lit(CONDITION_CUTOFF);
    if top <= T::zero() || eigenvalues.iter().any(|&v| v <= cutoff) {
        return Condition::Infinite;
    }
    let low = eigenvalues.iter().copied().fold(top, T::min);
    Condition::Finite(top / low)
}

pub fn build_mntk<T: Scalar>(jac: &JacobianBlock<T>) -> Result<Mntk<T>, MntkError> {
    if !jac.values.all_finite() {
        return Err(NumericsError::NonFinite { row: 0, col: 0 }.into());
    }
    let gram = if jac.values.cols() == 0 {
        Matrix::zeros(jac.values.rows(), jac.values.rows())
    } else {
        matmul_transpose(&jac.values)?
    };
    let spectrum = eig_psd(&gram, T::rel_floor(JACOBI_TOL))?;
    Ok(Mntk {
        module: jac.module,
        trace: gram.trace(),
        condition: condition_number(&spectrum.eigenvalues),
        gram,
        spectrum,
    })
}

/// `Σ_l Θ^l` over blocks that share one sample set and scalarization.
pub fn integral_ntk<T: Scalar>(jacs: &[JacobianBlock<T>]) -> Result<Matrix<T>, MntkError> {
    let first = jacs
        .first()
        .ok_or_else(|| MntkError::Alignment("no Jacobian blocks".into()))?;
    let rows = first.values.rows();
    let mut total = Matrix::zeros(rows, rows);
    for jac in jacs {
        if jac.values.rows() != rows || jac.scalarization != first.scalarization {
            return Err(MntkError::Alignment(format!(
                "module {} has {} rows ({:?}), expected {} ({:?})",
                jac.module,
                jac.values.rows(),
                jac.scalarization,
                rows,
                first.scalarization
            )));
        }
        if jac.values.cols() > 0 {
            total.add_assign(&matmul_transpose(&jac.values)?);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// `Σ_l Σ_i λ_i (u_iᵀ g)²`
    #[default]
    Exact,
    /// `Σ_l λ_max (u_1ᵀ g)²`
    PrincipalOnly,
}

/// First-order loss decrease per unit step predicted by the module spectra.
pub fn predicted_loss_reduction<T: Scalar>(
    mntks: &[Mntk<T>],
    g: &[T],
    mode: PredictionMode,
) -> Result<T, MntkError> {
    let mut total = T::zero();
    for m in mntks {
        let s = &m.spectrum;
        if s.eigenvectors.rows() != g.len() {
            return Err(MntkError::Shape(format!(
                "module {} spectrum has dimension {}, vector has {}",
                m.module,
                s.eigenvectors.rows(),
                g.len()
            )));
        }
        let count = match mode {
            PredictionMode::Exact => s.len(),
            PredictionMode::PrincipalOnly => s.len().min(1),
        };
        for i in 0..count {
            let proj = numerics::dot(&s.vector(i), g);
            total = total + s.eigenvalues[i] * proj * proj;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleSummary<T> {
    pub family: ModuleFamily,
    pub lambda_max: T,
    pub lambda_min: T,
    pub trace: T,
    /// `None` when every eigenvalue is zero.
    pub effective_rank: Option<T>,
    pub condition: Condition<T>,
    /// `λ₁ / λ₂`; `None` when λ₂ is zero.
    pub dominance: Option<T>,
    pub eigenvalues: Vec<T>,
}

/// Multiply-accumulates spent building one snapshot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SnapshotCost {
    pub forward: u64,
    pub backward: u64,
    pub gram: u64,
    pub eigen: u64,
}

impl SnapshotCost {
    pub fn total(&self) -> u64 {
        self.forward + self.backward + self.gram + self.eigen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumSnapshot<T> {
    pub episode: usize,
    pub samples: usize,
    pub per_module: BTreeMap<ModuleId, ModuleSummary<T>>,
    pub global_lambda_min: T,
    pub global_lambda_max: T,
    pub cost: SnapshotCost,
}

impl<T: Scalar> SpectrumSnapshot<T> {
    pub fn lambda_max(&self, id: ModuleId) -> Option<T> {
        self.per_module.get(&id).map(|s| s.lambda_max)
    }

    /// Assembles a snapshot from per-module λ_max values alone; each module
    /// gets the one-point spectrum `[λ_max]`.
    pub fn from_lambdas(episode: usize, lambdas: &BTreeMap<ModuleId, (ModuleFamily, T)>) -> Self {
        let per_module: BTreeMap<_, _> = lambdas
            .iter()
            .map(|(&id, &(family, l))| {
                (
                    id,
                    ModuleSummary {
                        family,
                        lambda_max: l,
                        lambda_min: l,
                        trace: l,
                        effective_rank: (l > T::zero()).then(T::one),
                        condition: condition_number(&[l]),
                        dominance: None,
                        eigenvalues: vec![l],
                    },
                )
            })
            .collect();
        let (lo, hi) = pooled_extrema(per_module.values());
        Self {
            episode,
            samples: 1,
            per_module,
            global_lambda_min: lo,
            global_lambda_max: hi,
            cost: SnapshotCost::default(),
        }
    }
}

fn pooled_extrema<'a, T: Scalar>(summaries: impl Iterator<Item = &'a ModuleSummary<T>>) -> (T, T) {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for v in summaries.flat_map(|s| s.eigenvalues.iter()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if lo > hi {
        (T::zero(), T::zero())
    } else {
        (lo, hi)
    }
}

pub fn summarize<T: Scalar>(m: &Mntk<T>, family: ModuleFamily) -> ModuleSummary<T> {
    let ev = &m.spectrum.eigenvalues;
    let dominance = match ev.get(1) {
        Some(&second) if second > T::zero() => Some(ev[0] / second),
        _ => None,
    };
    ModuleSummary {
        family,
        lambda_max: m.spectrum.lambda_max(),
        lambda_min: m.spectrum.lambda_min(),
        trace: m.trace,
        effective_rank: numerics::effective_rank(ev).ok(),
        condition: m.condition,
        dominance,
        eigenvalues: ev.clone(),
    }
}

/// mNTK spectra of every live module on `samples`.
pub fn snapshot<T: Scalar>(
    net: &ModularNetwork<T>,
    samples: &Matrix<T>,
    scalarization: Scalarization,
    episode: usize,
) -> Result<SpectrumSnapshot<T>, MntkError> {
    if samples.rows() < 2 {
        return Err(MntkError::Config(format!(
            "snapshot needs at least 2 samples, got {}",
            samples.rows()
        )));
    }
    let set = net.jacobians(samples, scalarization)?;
    let seeds_per_sample = match scalarization {
        Scalarization::SumOfLogits => 1,
        Scalarization::FullOutput => net.architecture().output_dim() as u64,
    };
    let forward = set.forward_flops.total();
    let mut cost = SnapshotCost {
        forward,
        backward: 2 * forward * seeds_per_sample,
        ..SnapshotCost::default()
    };
    let mut per_module = BTreeMap::new();
    for block in &set.blocks {
        let family = net.module(block.module)?.family;
        let m = build_mntk(block)?;
        let r = block.values.rows() as u64;
        cost.gram += r * (r + 1) / 2 * block.values.cols() as u64;
        cost.eigen += m.spectrum.cost_macs();
        per_module.insert(block.module, summarize(&m, family));
    }
    let (lo, hi) = pooled_extrema(per_module.values());
    Ok(SpectrumSnapshot {
        episode,
        samples: samples.rows(),
        per_module,
        global_lambda_min: lo,
        global_lambda_max: hi,
        cost,
    })
}

/// `s` distinct indices in `0..n`, uniform without replacement, reseeded
/// from `(seed, episode)`.
pub fn sample_indices(n: usize, s: usize, seed: u64, episode: usize) -> Result<Vec<usize>, MntkError> {
    if s < 2 || s > n {
        return Err(MntkError::Config(format!(
            "cannot draw {s} samples from {n} (need 2 <= S <= n)"
        )));
    }
    let stream = seed ^ (episode as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    Ok(index::sample(&mut rng, n, s).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo::Architecture;

    fn block(rows: &[Vec<f64>]) -> JacobianBlock<f64> {
        JacobianBlock {
            module: ModuleId::new(0, 0),
            values: Matrix::from_rows(rows).unwrap(),
            scalarization: Scalarization::SumOfLogits,
        }
    }

    #[test]
    fn rank_one_mntk() {
        let m = build_mntk(&block(&[vec![1.0], vec![2.0]])).unwrap();
        assert_eq!(m.gram, Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap());
        assert!((m.spectrum.eigenvalues[0] - 5.0).abs() < 1e-12);
        assert_eq!(m.spectrum.eigenvalues[1], 0.0);
        assert_eq!(m.trace, 5.0);
        assert!(m.condition.is_infinite());
    }

    #[test]
    fn identity_mntk() {
        let m = build_mntk(&block(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])).unwrap();
        for v in &m.spectrum.eigenvalues {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.condition, Condition::Finite(1.0));
    }

    #[test]
    fn golden_ratio_mntk() {
        let m = build_mntk(&block(&[vec![1.0, 0.0], vec![1.0, 1.0]])).unwrap();
        let r5 = 5f64.sqrt();
        assert!((m.spectrum.eigenvalues[0] - (3.0 + r5) / 2.0).abs() < 1e-12);
        assert!((m.spectrum.eigenvalues[1] - (3.0 - r5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn integral_of_disjoint_unit_blocks() {
        let a = block(&[vec![1.0], vec![0.0]]);
        let mut b = block(&[vec![0.0], vec![1.0]]);
        b.module = ModuleId::new(0, 1);
        assert_eq!(integral_ntk(&[a.clone(), b]).unwrap(), Matrix::identity(2));
        assert_eq!(integral_ntk(std::slice::from_ref(&a)).unwrap(), build_mntk(&a).unwrap().gram);
        let c = block(&[vec![1.0], vec![0.0], vec![2.0]]);
        assert!(matches!(integral_ntk(&[a, c]), Err(MntkError::Alignment(_))));
    }

    #[test]
    fn loss_reduction_examples() {
        let id = build_mntk(&block(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        let exact = predicted_loss_reduction(&[id], &[1.0, 1.0], PredictionMode::Exact).unwrap();
        assert!((exact - 2.0).abs() < 1e-12);

        let r1 = build_mntk(&block(&[vec![1.0], vec![2.0]])).unwrap();
        let exact = predicted_loss_reduction(std::slice::from_ref(&r1), &[1.0, 1.0], PredictionMode::Exact).unwrap();
        assert!((exact - 9.0).abs() < 1e-12);
        let orth = predicted_loss_reduction(std::slice::from_ref(&r1), &[2.0, -1.0], PredictionMode::Exact).unwrap();
        assert!(orth.abs() < 1e-12);
        assert!(matches!(
            predicted_loss_reduction(&[r1], &[1.0], PredictionMode::Exact),
            Err(MntkError::Shape(_))
        ));
    }

    #[test]
    fn zero_jacobian_module_has_zero_lambda() {
        // readout weights of block 1 are zero, so its parameters never reach the output
        let arch = Architecture::BlockMlp { d_in: 2, width: 4, blocks_per_layer: 2, layers: 1, d_out: 1, bias: false };
        let mut net = ModularNetwork::<f64>::build(&arch, 5).unwrap();
        let len = net.parameters().len();
        let mut p = net.parameters().to_vec();
        p[len - 2] = 0.0;
        p[len - 1] = 0.0;
        net = ModularNetwork::with_parameters(&arch, p).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 0.2], vec![0.7, -1.0]]).unwrap();
        let snap = snapshot(&net, &x, Scalarization::SumOfLogits, 0).unwrap();
        assert_eq!(snap.lambda_max(ModuleId::new(0, 1)), Some(0.0));
        assert!(snap.lambda_max(ModuleId::new(0, 0)).unwrap() > 0.0);
        assert_eq!(snap.global_lambda_min, 0.0);
    }

    #[test]
    fn duplicate_samples_give_rank_one() {
        let net = ModularNetwork::<f64>::build(&Architecture::block_mlp(3, 2, 2, 8), 1).unwrap();
        let x = Matrix::from_rows(&vec![vec![0.3, -0.2, 0.9]; 5]).unwrap();
        let snap = snapshot(&net, &x, Scalarization::SumOfLogits, 0).unwrap();
        for s in snap.per_module.values() {
            let nonzero = s.eigenvalues.iter().filter(|&&v| v > 1e-10 * s.lambda_max).count();
            assert!(nonzero <= 1);
        }
        assert!(snapshot(&net, &x.select_rows(&[0]), Scalarization::SumOfLogits, 0).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_distinct() {
        let a = sample_indices(100, 16, 3, 2).unwrap();
        assert_eq!(a, sample_indices(100, 16, 3, 2).unwrap());
        assert_ne!(a, sample_indices(100, 16, 3, 3).unwrap());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);
        assert!(sample_indices(10, 1, 0, 0).is_err());
        assert!(sample_indices(10, 11, 0, 0).is_err());
    }
}
