//! Regularized symmetric positive (semi)definite helpers.
//!
//! Every matrix is symmetrized first. The fast path is a Cholesky
//! factorization; when it fails, or the factorization cannot certify that the
//! smallest eigenvalue is above [`EIGEN_FLOOR`], the eigenvalues are clamped at
//! the floor instead.

use nalgebra::{Cholesky, DMatrix, SMatrix, SymmetricEigen};

pub(crate) const EIGEN_FLOOR: f64 = 1e-12;

pub(crate) fn symmetrize<const D: usize>(m: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn symmetrize_dyn(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn eigen_dyn(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut e = SymmetricEigen::new(m.clone());
    e.eigenvalues.iter_mut().for_each(|l| *l = l.max(EIGEN_FLOOR));
    e
}

fn to_dyn<const D: usize>(m: &SMatrix<f64, D, D>) -> DMatrix<f64> {
    DMatrix::from_column_slice(D, D, m.as_slice())
}

fn from_dyn<const D: usize>(m: &DMatrix<f64>) -> SMatrix<f64, D, D> {
    SMatrix::<f64, D, D>::from_column_slice(m.as_slice())
}

/// Eigenvalue-clamped copy of a dynamic symmetric matrix.
pub(crate) fn clamp_psd_dyn(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = symmetrize_dyn(m);
    if Cholesky::new(s.clone()).is_some() {
        return s;
    }
    eigen_dyn(&s).recompose()
}

/// Symmetrized covariance, eigen-clamped when not positive definite.
pub(crate) fn clamp_psd<const D: usize>(m: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    let s = symmetrize(m);
    if Cholesky::new(s).is_some() {
        return s;
    }
    from_dyn(&eigen_dyn(&to_dyn(&s)).recompose())
}

/// Regularized inverse and log-determinant.
pub(crate) fn inv_logdet<const D: usize>(m: &SMatrix<f64, D, D>) -> (SMatrix<f64, D, D>, f64) {
    let s = symmetrize(m);
    if let Some(ch) = Cholesky::new(s) {
        let inv = ch.inverse();
        // trace(M⁻¹) bounds 1/λ_min, so this certifies λ_min ≥ the floor.
        if inv.trace() <= 1.0 / EIGEN_FLOOR && inv.iter().all(|v| v.is_finite()) {
            let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            return (inv, logdet);
        }
    }
    let e = eigen_dyn(&to_dyn(&s));
    let inv = &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|l| 1.0 / l)) * e.eigenvectors.transpose();
    (from_dyn(&inv), e.eigenvalues.iter().map(|l| l.ln()).sum())
}

pub(crate) fn inverse<const D: usize>(m: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    inv_logdet(m).0
}

/// Dynamic counterpart of [`inv_logdet`].
pub(crate) fn inv_logdet_dyn(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let s = symmetrize_dyn(m);
    if let Some(ch) = Cholesky::new(s.clone()) {
        let inv = ch.inverse();
        if inv.trace() <= 1.0 / EIGEN_FLOOR && inv.iter().all(|v| v.is_finite()) {
            let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            return (inv, logdet);
        }
    }
    let e = eigen_dyn(&s);
    let inv = &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|l| 1.0 / l)) * e.eigenvectors.transpose();
    (inv, e.eigenvalues.iter().map(|l| l.ln()).sum())
}

/// A matrix `S` with `S Sᵀ` equal to the (clamped) input.
pub(crate) fn sqrt<const D: usize>(m: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    let s = symmetrize(m);
    if let Some(ch) = Cholesky::new(s) {
        return ch.unpack();
    }
    let e = eigen_dyn(&to_dyn(&s));
    from_dyn(&(&e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt))))
}

pub(crate) fn sqrt_dyn(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = symmetrize_dyn(m);
    if let Some(ch) = Cholesky::new(s.clone()) {
        return ch.unpack();
    }
    let e = eigen_dyn(&s);
    &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt))
}
