use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::Matrix;
use crate::scalar::Scalar;
use crate::tape::softmax_in_place;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(1/2n) Σ ‖z − y‖²`.
    #[default]
    SquaredError,
    /// Softmax cross-entropy over consecutive groups of `class_group` logits.
    /// Groups whose targets sum to zero are unlabelled and skipped; the loss
    /// is the mean over labelled groups.
    SoftmaxCrossEntropy,
}

/// Loss value and `∂ℒ/∂Z`.
pub(crate) fn evaluate<T: Scalar>(
    kind: LossKind,
    outputs: &Matrix<T>,
    targets: &Matrix<T>,
    group: usize,
) -> Result<(T, Matrix<T>), ModelError> {
    if outputs.shape() != targets.shape() {
        return Err(ModelError::Shape(format!(
            "outputs {:?} vs targets {:?}",
            outputs.shape(),
            targets.shape()
        )));
    }
    let (n, k) = outputs.shape();
    let mut grad = Matrix::zeros(n, k);
    let mut total = T::zero();
    let count = match kind {
        LossKind::SquaredError => {
            for i in 0..n {
                let mut row_loss = T::zero();
                for j in 0..k {
                    let r = outputs[(i, j)] - targets[(i, j)];
                    row_loss = row_loss + r * r;
                    grad[(i, j)] = r;
                }
                if !row_loss.is_finite() {
                    return Err(ModelError::NonFiniteLoss { sample: i });
                }
                total = total + row_loss * T::lit(0.5);
            }
            n
        }
        LossKind::SoftmaxCrossEntropy => {
            if group == 0 || k % group != 0 {
                return Err(ModelError::Shape(format!("{k} logits not divisible into groups of {group}")));
            }
            let mut labelled = 0;
            let mut p = vec![T::zero(); group];
            for i in 0..n {
                for g in (0..k).step_by(group) {
                    let y = &targets.row(i)[g..g + group];
                    let mass: T = y.iter().copied().sum();
                    if mass <= T::zero() {
                        continue;
                    }
                    labelled += 1;
                    p.copy_from_slice(&outputs.row(i)[g..g + group]);
                    softmax_in_place(&mut p);
                    let mut l = T::zero();
                    for c in 0..group {
                        if y[c] > T::zero() {
                            l = l - y[c] * p[c].ln();
                        }
                        grad[(i, g + c)] = mass * p[c] - y[c];
                    }
                    if !l.is_finite() {
                        return Err(ModelError::NonFiniteLoss { sample: i });
                    }
                    total = total + l;
                }
            }
            labelled
        }
    };
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::from_count(count);
    Ok((total * inv, grad.scale(inv)))
}
