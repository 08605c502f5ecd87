//! Seeded synthetic datasets.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modelzoo::{Architecture, Batch, ModularNetwork};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid dataset parameters: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    /// Regression onto a frozen random tanh network plus Gaussian noise.
    TeacherStudent {
        n_train: usize,
        n_val: usize,
        d_in: usize,
        teacher_width: usize,
        noise: f64,
    },
    /// Regression onto a random linear map plus Gaussian noise.
    LinearTeacher {
        n_train: usize,
        n_val: usize,
        d_in: usize,
        noise: f64,
    },
    /// Two interleaved planar spirals labelled ±1.
    SpiralClassify {
        n_train: usize,
        n_val: usize,
        turns: f64,
        noise: f64,
    },
    /// Periodic token sequences with masked positions to recover.
    TinyTokenMask {
        n_train: usize,
        n_val: usize,
        seq_len: usize,
        vocab: usize,
        period: usize,
        mask_rate: f64,
    },
}

/// Per-sample layout of inputs and targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataShape {
    Flat { d_in: usize, d_out: usize },
    /// Inputs are `seq_len × d_token` one-hot rows; targets `seq_len × d_out`.
    Sequence { seq_len: usize, d_token: usize, d_out: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub train: Batch<T>,
    pub validation: Batch<T>,
    pub seed: u64,
    pub shape: DataShape,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::TeacherStudent { .. } => "teacher_student",
            DatasetKind::LinearTeacher { .. } => "linear_teacher",
            DatasetKind::SpiralClassify { .. } => "spiral_classify",
            DatasetKind::TinyTokenMask { .. } => "tiny_token_mask",
        }
    }

    fn sizes(&self) -> (usize, usize) {
        match *self {
            DatasetKind::TeacherStudent { n_train, n_val, .. }
            | DatasetKind::LinearTeacher { n_train, n_val, .. }
            | DatasetKind::SpiralClassify { n_train, n_val, .. }
            | DatasetKind::TinyTokenMask { n_train, n_val, .. } => (n_train, n_val),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let spec = |msg: String| Err(DataError::Spec(msg));
        let (n_train, n_val) = self.sizes();
        if n_train < 4 || n_val < 4 {
            return spec(format!("need at least 4 train and 4 validation samples, got {n_train}/{n_val}"));
        }
        match *self {
            DatasetKind::TeacherStudent { d_in, teacher_width, noise, .. } => {
                if d_in == 0 || teacher_width < 2 || teacher_width % 2 != 0 {
                    return spec("teacher needs d_in >= 1 and an even width >= 2".into());
                }
                check_noise(noise)
            }
            DatasetKind::LinearTeacher { d_in, noise, .. } => {
                if d_in == 0 {
                    return spec("d_in must be positive".into());
                }
                check_noise(noise)
            }
            DatasetKind::SpiralClassify { turns, noise, .. } => {
                if n_train % 2 != 0 || n_val % 2 != 0 {
                    return spec("spiral split sizes must be even".into());
                }
                if !(turns > 0.0 && turns.is_finite()) {
                    return spec(format!("turns must be positive, got {turns}"));
                }
                check_noise(noise)
            }
            DatasetKind::TinyTokenMask { seq_len, vocab, period, mask_rate, .. } => {
                if !(4..=16).contains(&seq_len) {
                    return spec(format!("seq_len must be in [4, 16], got {seq_len}"));
                }
                if !(2..=32).contains(&vocab) {
                    return spec(format!("vocab must be in [2, 32], got {vocab}"));
                }
                if period == 0 || period >= seq_len {
                    return spec(format!("period must be in [1, seq_len), got {period}"));
                }
                if !(mask_rate > 0.0 && mask_rate < 1.0) {
                    return spec(format!("mask_rate must be in (0, 1), got {mask_rate}"));
                }
                Ok(())
            }
        }
    }

    pub fn shape(&self) -> DataShape {
        match *self {
            DatasetKind::TeacherStudent { d_in, .. } | DatasetKind::LinearTeacher { d_in, .. } => {
                DataShape::Flat { d_in, d_out: 1 }
            }
            DatasetKind::SpiralClassify { .. } => DataShape::Flat { d_in: 2, d_out: 1 },
            DatasetKind::TinyTokenMask { seq_len, vocab, .. } => DataShape::Sequence {
                seq_len,
                d_token: vocab + 1,
                d_out: vocab,
            },
        }
    }
}

fn check_noise(noise: f64) -> Result<(), DataError> {
    if noise >= 0.0 && noise.is_finite() {
        Ok(())
    } else {
        Err(DataError::Spec(format!("noise must be non-negative, got {noise}")))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix<f64> {
    let data = (0..n * d).map(|_| normal(rng)).collect();
    Matrix::new(n, d, data).expect("finite gaussian samples")
}

pub fn generate_dataset<T: Scalar>(kind: &DatasetKind, seed: u64) -> Result<Dataset<T>, DataError> {
    kind.validate()?;
    let (n_train, n_val) = kind.sizes();
    let n = n_train + n_val;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, targets) = match *kind {
        DatasetKind::TeacherStudent { d_in, teacher_width, noise, .. } => {
            let arch = Architecture::block_mlp(d_in, 2, 1, teacher_width);
            let teacher = ModularNetwork::<f64>::build(&arch, rng.random())
                .map_err(|e| DataError::Spec(e.to_string()))?;
            let x = gaussian_inputs(&mut rng, n, d_in);
            let (y, _) = teacher.forward(&x).map_err(|e| DataError::Spec(e.to_string()))?;
            let y = y.map(|v| v + noise * normal(&mut rng));
            (x, y)
        }
        DatasetKind::LinearTeacher { d_in, noise, .. } => {
            let scale = 1.0 / (d_in as f64).sqrt();
            let w: Vec<f64> = (0..d_in).map(|_| normal(&mut rng) * scale).collect();
            let x = gaussian_inputs(&mut rng, n, d_in);
            let y: Vec<f64> = (0..n)
                .map(|i| crate::numerics::dot(x.row(i), &w) + noise * normal(&mut rng))
                .collect();
            (x, Matrix::new(n, 1, y).expect("finite targets"))
        }
        DatasetKind::SpiralClassify { turns, noise, .. } => {
            let mut x = Vec::with_capacity(2 * n);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % 2;
                let t: f64 = rng.random_range(0.1..1.0);
                let angle = turns * std::f64::consts::TAU * t + class as f64 * std::f64::consts::PI;
                x.push(t * angle.cos() + noise * normal(&mut rng));
                x.push(t * angle.sin() + noise * normal(&mut rng));
                y.push(if class == 0 { 1.0 } else { -1.0 });
            }
            (
                Matrix::new(n, 2, x).expect("finite spiral"),
                Matrix::new(n, 1, y).expect("finite labels"),
            )
        }
        DatasetKind::TinyTokenMask { seq_len, vocab, period, mask_rate, .. } => {
            let d_token = vocab + 1;
            let mut x = Matrix::zeros(n, seq_len * d_token);
            let mut y = Matrix::zeros(n, seq_len * vocab);
            for i in 0..n {
                let pattern: Vec<usize> = (0..period).map(|_| rng.random_range(0..vocab)).collect();
                let masked = masked_positions(&mut rng, seq_len, mask_rate);
                for p in 0..seq_len {
                    let token = pattern[p % period];
                    if masked.contains(&p) {
                        x[(i, p * d_token + vocab)] = 1.0;
                        y[(i, p * vocab + token)] = 1.0;
                    } else {
                        x[(i, p * d_token + token)] = 1.0;
                    }
                }
            }
            (x, y)
        }
    };
    let train_idx: Vec<usize> = (0..n_train).collect();
    let val_idx: Vec<usize> = (n_train..n).collect();
    let cast = |m: Matrix<f64>, idx: &[usize]| m.select_rows(idx).cast::<T>();
    let train = Batch::new(cast(inputs.clone(), &train_idx), cast(targets.clone(), &train_idx))
        .map_err(|e| DataError::Spec(e.to_string()))?;
    let validation = Batch::new(cast(inputs, &val_idx), cast(targets, &val_idx))
        .map_err(|e| DataError::Spec(e.to_string()))?;
    Ok(Dataset {
        name: kind.name().to_string(),
        train,
        validation,
        seed,
        shape: kind.shape(),
    })
}

/// `rate · seq_len` positions rounded stochastically, at least one, drawn
/// uniformly without replacement.
fn masked_positions(rng: &mut ChaCha8Rng, seq_len: usize, rate: f64) -> Vec<usize> {
    let expected = rate * seq_len as f64;
    let base = expected.floor();
    let extra = usize::from(rng.random::<f64>() < expected - base);
    let count = (base as usize + extra).clamp(1, seq_len);
    index::sample(rng, seq_len, count).into_vec()
}
