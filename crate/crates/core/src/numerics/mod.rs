//! Dense linear algebra for small Gram matrices.
//!
//! Everything here is a pure function over immutable inputs. The symmetric
//! eigensolver is a cyclic Jacobi sweep; `lambda_max` is a power iteration
//! that is cheaper when only the principal pair is needed.

mod eigen;
mod matrix;

pub use eigen::{eig_psd, eig_sym, lambda_max, top_eigenpairs, PrincipalPair, Spectrum};
pub use matrix::Matrix;
pub(crate) use matrix::dot;

use thiserror::Error;

use crate::scalar::Scalar;

/// Eigenvalues in `[-PSD_CLAMP_TOL * λ₁, 0)` are clamped to zero for PSD inputs.
pub const PSD_CLAMP_TOL: f64 = 1e-10;

/// Largest tolerated relative asymmetry for `eig_sym` inputs.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("matrix is not positive semi-definite: eigenvalue {value:e} below -{tol:e} * {lambda_max:e}")]
    NotPsd { value: f64, lambda_max: f64, tol: f64 },
    #[error("effective rank undefined: {0}")]
    UndefinedRank(String),
}

/// Gram product `A · Aᵀ`. The result is exactly symmetric: the upper
/// triangle is computed and mirrored.
pub fn matmul_transpose<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    if a.is_empty() {
        return Err(NumericsError::Dimension(format!(
            "gram of empty {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(a.row(i), a.row(j));
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Roy–Vetterli effective rank: `exp(H(p))` with `p = s / Σs` and `0 ln 0 = 0`.
pub fn effective_rank<T: Scalar>(singular_values: &[T]) -> Result<T, NumericsError> {
    if let Some(v) = singular_values.iter().find(|v| !v.is_finite() || **v < T::zero()) {
        return Err(NumericsError::UndefinedRank(format!("invalid value {v}")));
    }
    let total: T = singular_values.iter().copied().sum();
    if total <= T::zero() {
        return Err(NumericsError::UndefinedRank("all values are zero".into()));
    }
    let entropy = singular_values
        .iter()
        .filter(|&&s| s > T::zero())
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum::<T>();
    let n = T::from_count(singular_values.len());
    // exp of a rounded entropy can land a few ulps outside [1, n].
    Ok(entropy.exp().max(T::one()).min(n))
}

/// `‖a − b‖_F`.
pub fn frobenius_distance<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T, NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::Shape(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(vector_distance(a.as_slice(), b.as_slice()))
}

pub(crate) fn vector_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}
