use crate::numerics::{dot, Matrix, NumericsError, PSD_CLAMP_TOL, SYMMETRY_TOL};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 100;
const MAX_POWER_ITERATIONS: usize = 200_000;

/// Full symmetric eigendecomposition, eigenvalues sorted descending.
///
/// `eigenvectors` holds one unit eigenvector per column, paired with
/// `eigenvalues` by index. Each vector is signed so that its first
/// non-negligible component is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    pub eigenvalues: Vec<T>,
    pub eigenvectors: Matrix<T>,
    /// Jacobi sweeps performed.
    pub sweeps: usize,
    /// Plane rotations applied; drives the eigensolver cost estimate.
    pub rotations: usize,
}

impl<T: Scalar> Spectrum<T> {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn vector(&self, i: usize) -> Vec<T> {
        self.eigenvectors.column(i)
    }

    pub fn lambda_max(&self) -> T {
        self.eigenvalues.first().copied().unwrap_or_else(T::zero)
    }

    pub fn lambda_min(&self) -> T {
        self.eigenvalues.last().copied().unwrap_or_else(T::zero)
    }

    /// `U Λ Uᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let n = self.eigenvectors.rows();
        let mut out = Matrix::zeros(n, n);
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            let u = self.vector(k);
            for i in 0..n {
                let ui = lambda * u[i];
                for j in 0..n {
                    out[(i, j)] = out[(i, j)] + ui * u[j];
                }
            }
        }
        out
    }

    /// Approximate multiply-accumulate count spent in the solver.
    pub fn cost_macs(&self) -> u64 {
        // each rotation touches two rows/columns of A and two columns of V
        6 * self.rotations as u64 * self.eigenvectors.rows() as u64
    }

    /// Clamps eigenvalues in `[-tol·λ₁, 0)` to zero; anything lower is an error.
    pub fn clamp_psd(mut self, rel_tol: T) -> Result<Self, NumericsError> {
        let top = self.lambda_max().max(T::zero());
        let floor = -rel_tol * top;
        for v in &mut self.eigenvalues {
            if *v < T::zero() {
                if *v < floor {
                    return Err(NumericsError::NotPsd {
                        value: v.as_f64(),
                        lambda_max: top.as_f64(),
                        tol: rel_tol.as_f64(),
                    });
                }
                *v = T::zero();
            }
        }
        Ok(self)
    }
}

fn check_symmetric<T: Scalar>(m: &Matrix<T>) -> Result<(), NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::Shape(format!(
            "expected square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let asym = m.asymmetry();
    if asym > T::rel_floor(SYMMETRY_TOL) {
        return Err(NumericsError::Shape(format!(
            "matrix asymmetric (relative {:e})",
            asym.as_f64()
        )));
    }
    Ok(())
}

fn off_diagonal_norm<T: Scalar>(a: &Matrix<T>) -> T {
    let n = a.rows();
    let mut s = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s = s + a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps until the off-diagonal Frobenius norm falls to `tol · ‖m‖_F`.
/// Ties in the descending sort keep the original diagonal order.
pub fn eig_sym<T: Scalar>(m: &Matrix<T>, tol: T) -> Result<Spectrum<T>, NumericsError> {
    check_symmetric(m)?;
    let n = m.rows();
    // symmetrize so rotations act on an exactly symmetric matrix
    let mut a = Matrix::zeros(n, n);
    let half = T::lit(0.5);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = (m[(i, j)] + m[(j, i)]) * half;
        }
    }
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    let target = tol * scale;
    let mut sweeps = 0;
    let mut rotations = 0;

    while off_diagonal_norm(&a) > target {
        if sweeps == MAX_SWEEPS {
            return Err(NumericsError::NoConvergence {
                iterations: sweeps,
                residual: (off_diagonal_norm(&a) / scale).as_f64(),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (apq + apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(T::one()));
                let c = T::one() / t.hypot(T::one());
                let s = t * c;
                a[(p, p)] = a[(p, p)] - t * apq;
                a[(q, q)] = a[(q, q)] + t * apq;
                a[(p, q)] = T::zero();
                a[(q, p)] = T::zero();
                for r in 0..n {
                    if r != p && r != q {
                        let arp = a[(r, p)];
                        let arq = a[(r, q)];
                        let np = c * arp - s * arq;
                        let nq = s * arp + c * arq;
                        a[(r, p)] = np;
                        a[(p, r)] = np;
                        a[(r, q)] = nq;
                        a[(q, r)] = nq;
                    }
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = c * vrp - s * vrq;
                    v[(r, q)] = s * vrp + c * vrq;
                }
                rotations += 1;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep their index order
    order.sort_by(|&i, &j| {
        a[(j, j)]
            .partial_cmp(&a[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigenvalues: Vec<T> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut u = v.column(src);
        canonical_sign(&mut u);
        for (r, x) in u.into_iter().enumerate() {
            vectors[(r, col)] = x;
        }
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors: vectors,
        sweeps,
        rotations,
    })
}

/// `eig_sym` followed by PSD clamping at the fixed relative tolerance.
pub fn eig_psd<T: Scalar>(m: &Matrix<T>, tol: T) -> Result<Spectrum<T>, NumericsError> {
    eig_sym(m, tol)?.clamp_psd(T::rel_floor(PSD_CLAMP_TOL))
}

fn canonical_sign<T: Scalar>(u: &mut [T]) {
    let norm = u.iter().map(|&x| x * x).sum::<T>().sqrt();
    let eps = T::epsilon().sqrt() * norm;
    if let Some(&lead) = u.iter().find(|x| x.abs() > eps) {
        if lead < T::zero() {
            u.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Principal eigenpair from power iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalPair<T> {
    pub value: T,
    pub vector: Vec<T>,
    /// Set when the matrix is zero and the vector is arbitrary.
    pub degenerate: bool,
    pub iterations: usize,
}

fn start_vector<T: Scalar>(n: usize) -> Vec<T> {
    // fixed pseudo-random start, avoids the all-ones vector which is
    // orthogonal to common structured eigenvectors
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut v: Vec<T> = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6_364_136_223_846_793_005)
                .wrapping_add(1_442_695_040_888_963_407);
            T::lit(((state >> 11) as f64) / ((1u64 << 53) as f64) + 0.25)
        })
        .collect();
    normalize(&mut v);
    v
}

fn normalize<T: Scalar>(v: &mut [T]) -> T {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm > T::zero() {
        v.iter_mut().for_each(|x| *x = *x / norm);
    }
    norm
}

/// Principal eigenpair of a symmetric PSD matrix by power iteration.
///
/// Stops once the residual `‖Mv − ρv‖` is below `tol · ρ`, which bounds the
/// eigenvalue error well below `tol · λ₁`.
pub fn lambda_max<T: Scalar>(m: &Matrix<T>, tol: T) -> Result<PrincipalPair<T>, NumericsError> {
    check_symmetric(m)?;
    let n = m.rows();
    if n == 0 {
        return Err(NumericsError::Dimension("empty matrix".into()));
    }
    if m.frobenius_norm() == T::zero() {
        let mut vector = vec![T::zero(); n];
        vector[0] = T::one();
        return Ok(PrincipalPair {
            value: T::zero(),
            vector,
            degenerate: true,
            iterations: 0,
        });
    }
    let mut v = start_vector::<T>(n);
    let mut residual = T::infinity();
    for it in 1..=MAX_POWER_ITERATIONS {
        let mut w = m.mul_vec(&v);
        let rho = dot(&v, &w);
        residual = w
            .iter()
            .zip(&v)
            .map(|(&wi, &vi)| (wi - rho * vi) * (wi - rho * vi))
            .sum::<T>()
            .sqrt();
        if residual <= tol * rho.abs() {
            canonical_sign(&mut v);
            return Ok(PrincipalPair {
                value: rho,
                vector: v,
                degenerate: false,
                iterations: it,
            });
        }
        if normalize(&mut w) == T::zero() {
            // start landed in the null space; a fixed shift moves it out
            v = start_vector::<T>(n + 1)[1..].to_vec();
            normalize(&mut v);
            continue;
        }
        v = w;
    }
    Err(NumericsError::NoConvergence {
        iterations: MAX_POWER_ITERATIONS,
        residual: residual.as_f64(),
    })
}

/// Leading `k` eigenpairs by power iteration with Hotelling deflation.
pub fn top_eigenpairs<T: Scalar>(
    m: &Matrix<T>,
    k: usize,
    tol: T,
) -> Result<Vec<PrincipalPair<T>>, NumericsError> {
    let mut work = m.clone();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(m.rows()) {
        let pair = lambda_max(&work, tol)?;
        if pair.degenerate {
            out.push(pair);
            break;
        }
        let n = work.rows();
        for i in 0..n {
            for j in 0..n {
                work[(i, j)] = work[(i, j)] - pair.value * pair.vector[i] * pair.vector[j];
            }
        }
        // keep exact symmetry after deflation
        for i in 0..n {
            for j in (i + 1)..n {
                let s = (work[(i, j)] + work[(j, i)]) * T::lit(0.5);
                work[(i, j)] = s;
                work[(j, i)] = s;
            }
        }
        out.push(pair);
    }
    Ok(out)
}
