//! Modular NTK spectra and spectrum-driven selective training for small
//! networks.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.
//!
//! ```
//! use mat_core::{build_network, snapshot, Architecture, Matrix64, Network, Scalarization};
//!
//! let net: Network = build_network(&Architecture::block_mlp(3, 2, 2, 8), 7).unwrap();
//! let x = Matrix64::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.5, 0.4, 0.0]]).unwrap();
//! let snap = snapshot(&net, &x, Scalarization::SumOfLogits, 0).unwrap();
//! assert_eq!(snap.per_module.len(), 4);
//! ```

pub mod data;
pub mod mntk;
pub mod modelzoo;
pub mod numerics;
pub mod policy;
pub mod scalar;
mod tape;
pub mod trainer;

pub use data::{generate_dataset, DataError, DataShape, Dataset, DatasetKind};
pub use mntk::{
    build_mntk, integral_ntk, predicted_loss_reduction, sample_indices, snapshot, Condition, Mntk, MntkError,
    ModuleSummary, PredictionMode, SnapshotCost, SpectrumSnapshot,
};
pub use modelzoo::{
    build_network, Architecture, Batch, Gradients, JacobianBlock, JacobianSet, LossAndGradients, LossKind, ModelError,
    ModularNetwork, ModuleFamily, ModuleId, ModuleSpec, Scalarization, SharedRule,
};
pub use numerics::{
    eig_psd, eig_sym, effective_rank, frobenius_distance, lambda_max, matmul_transpose, top_eigenpairs, Matrix,
    NumericsError, PrincipalPair, Spectrum,
};
pub use policy::{
    decide, eigen_threshold, modular_split, temporal_criterion, temporal_stop, ModuleSets, PolicyConfig, PolicyError,
    PolicyState, Thresholds,
};
pub use scalar::Scalar;
pub use tape::FlopCount;
pub use trainer::{
    epoch_histogram, overfit_probe, prune_by_lambda, train, train_with, EpochEvent, EpochFlops, EpochPlan, FlopsLedger,
    MetricRow, MultirateConfig, Patience, PolicyKind, RowScope, RunResult, Schedule, StopReason, TrainConfig,
    TrainError,
};

pub type Matrix64 = Matrix<f64>;
pub type Spectrum64 = Spectrum<f64>;
pub type Network = ModularNetwork<f64>;
pub type Batch64 = Batch<f64>;
pub type Dataset64 = Dataset<f64>;
pub type Mntk64 = Mntk<f64>;
pub type Snapshot64 = SpectrumSnapshot<f64>;
pub type RunResult64 = RunResult<f64>;
