//! Dense symmetric kernels: eigendecomposition, SPD log-determinant and
//! inverse, and the ADMM stationarity subproblem −V⁻¹ + λV = R.
//!
//! Inputs are symmetrized as (M + Mᵀ)/2 before factorization to absorb
//! round-off, and the backend is deterministic given identical input bits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};

/// Full spectral decomposition with eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SymEig {
    /// Q · diag(λ) · Qᵀ.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        let scaled = DMatrix::from_fn(q.nrows(), q.ncols(), |r, c| q[(r, c)] * self.eigenvalues[c]);
        &scaled * q.transpose()
    }
}

fn check_symmetry(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension {
            context: "symmetric kernel",
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    let scale = m.norm().max(1.0);
    let asym = (m - m.transpose()).norm() / scale;
    if asym > 1e-8 {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Spectral decomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eig(m: &DMatrix<f64>) -> Result<SymEig> {
    check_symmetry(m)?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let dim = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = DVector::from_fn(dim, |i, _| eig.eigenvalues[order[i]]);
    let eigenvectors = DMatrix::from_fn(dim, dim, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Log-determinant via Cholesky; failure signals a non-SPD input.
pub fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = symmetrize(m).cholesky().ok_or(Error::NotPositiveDefinite {
        context: "logdet factorization",
    })?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        acc += l[(i, i)].ln();
    }
    Ok(2.0 * acc)
}

/// SPD inverse via Cholesky, re-symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m).cholesky().ok_or(Error::NotPositiveDefinite {
        context: "inverse factorization",
    })?;
    Ok(symmetrize(&chol.inverse()))
}

/// Both the log-determinant and the inverse from one factorization.
pub fn logdet_and_inverse(m: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let chol = symmetrize(m).cholesky().ok_or(Error::NotPositiveDefinite {
        context: "factorization",
    })?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        acc += l[(i, i)].ln();
    }
    Ok((2.0 * acc, symmetrize(&chol.inverse())))
}

/// Positive root of λy² − ry − 1 = 0. For r ≤ 0 the direct formula cancels,
/// so the algebraically equivalent conjugate form is used instead.
fn stationarity_root(r: f64, lambda: f64) -> f64 {
    let disc = (r * r + 4.0 * lambda).sqrt();
    if r >= 0.0 {
        (r + disc) / (2.0 * lambda)
    } else {
        2.0 / (disc - r)
    }
}

/// Solve −V⁻¹ + λV = R with V ≻ 0 for symmetric R and λ > 0.
///
/// With R = QLQᵀ the solution shares R's eigenvectors and the eigenvalues of
/// V are the positive roots (L_ii + √(L_ii² + 4λ))/(2λ), so one
/// eigendecomposition suffices and V is positive definite for any λ > 0.
pub fn solve_stationarity(r: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!(
            "stationarity subproblem needs lambda > 0, got {lambda}"
        )));
    }
    let eig = sym_eig(r)?;
    let dim = r.nrows();
    let roots = DVector::from_fn(dim, |i, _| stationarity_root(eig.eigenvalues[i], lambda));
    let q = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(dim, dim, |row, col| q[(row, col)] * roots[col]);
    Ok(symmetrize(&(&scaled * q.transpose())))
}

/// Frobenius norm of −V⁻¹ + λV − R, the stationarity residual.
pub fn stationarity_residual(v: &DMatrix<f64>, lambda: f64, r: &DMatrix<f64>) -> Result<f64> {
    let v_inv = spd_inverse(v)?;
    Ok((-&v_inv + v * lambda - r).norm())
}

/// Dense symmetric matrix with entries ~ U(−1, 1); test and synth helper.
pub fn random_symmetric<R: Rng>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..=i {
            let v = rng.random_range(-1.0..1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Random SPD matrix A·Aᵀ + jitter·I; test and synth helper.
pub fn random_spd<R: Rng>(dim: usize, jitter: f64, rng: &mut R) -> DMatrix<f64> {
    let a = random_symmetric(dim, rng);
    let mut m = &a * a.transpose();
    for i in 0..dim {
        m[(i, i)] += jitter;
    }
    symmetrize(&m)
}
