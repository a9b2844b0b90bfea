//! Small dense symmetric-matrix helpers built on `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative asymmetry tolerance for symmetric inputs.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues down to `-PSD_TOL` (scaled by the spectral radius when it exceeds 1)
/// are treated as numerical zeros.
pub const PSD_TOL: f64 = 1e-10;
/// Condition number above which a covariance is declared singular.
pub const MAX_CONDITION: f64 = 1e12;

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
}

pub fn is_symmetric(m: &Matrix) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = max_abs(m).max(1.0);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric PSD matrix, with tiny negative
/// eigenvalues clamped to zero.
pub fn psd_eigen(m: &Matrix) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !is_symmetric(m) {
        return Err(Error::InvalidMatrix("matrix is not symmetric".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidMatrix("matrix has non-finite entries".into()));
    }
    let mut eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |a, &x| a.max(x.abs()));
    for lam in eig.eigenvalues.iter_mut() {
        if *lam < 0.0 {
            if *lam < -PSD_TOL * scale {
                return Err(Error::InvalidMatrix(format!(
                    "matrix is indefinite (eigenvalue {lam:.3e})"
                )));
            }
            *lam = 0.0;
        }
    }
    Ok(eig)
}

/// Whether `m` is symmetric PSD up to the numerical tolerances.
pub fn is_psd(m: &Matrix) -> bool {
    psd_eigen(m).is_ok()
}

fn compose(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> Matrix {
    let v = &eig.eigenvectors;
    let d = Matrix::from_diagonal(&eig.eigenvalues.map(f));
    symmetrize(&(v * d * v.transpose()))
}

/// Principal square root of a symmetric PSD matrix.
pub fn matrix_sqrt_psd(m: &Matrix) -> Result<Matrix> {
    let eig = psd_eigen(m)?;
    Ok(compose(&eig, f64::sqrt))
}

/// A factor `L` with `L Lᵀ = m`, valid for singular PSD matrices.
pub fn psd_factor(m: &Matrix) -> Result<Matrix> {
    let eig = psd_eigen(m)?;
    let d = Matrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d)
}

/// Inverse of a symmetric positive definite matrix with condition monitoring.
#[derive(Debug, Clone)]
pub struct SpdInverse {
    pub inverse: Matrix,
    pub inv_sqrt: Matrix,
    pub log_det: f64,
    pub condition: f64,
}

impl SpdInverse {
    /// Fails with `None` when the matrix is singular or its condition number
    /// exceeds [`MAX_CONDITION`].
    pub fn new(m: &Matrix) -> Result<Option<SpdInverse>> {
        let eig = psd_eigen(m)?;
        let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if max <= 0.0 || min <= 0.0 {
            return Ok(None);
        }
        let condition = max / min;
        if condition > MAX_CONDITION {
            return Ok(None);
        }
        let log_det = eig.eigenvalues.iter().map(|l| l.ln()).sum();
        Ok(Some(SpdInverse {
            inverse: compose(&eig, |l| 1.0 / l),
            inv_sqrt: compose(&eig, |l| 1.0 / l.sqrt()),
            log_det,
            condition,
        }))
    }

    pub fn condition_of(m: &Matrix) -> Result<f64> {
        let eig = psd_eigen(m)?;
        let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(if min <= 0.0 { f64::INFINITY } else { max / min })
    }
}

/// Relative Frobenius distance `‖a - b‖_F / max(‖b‖_F, 1e-300)`.
pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Apply `m` to a row slice, writing into `out`.
#[inline]
pub fn mat_vec_into(m: &Matrix, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate().take(m.nrows()) {
        let mut acc = 0.0;
        for j in 0..d {
            acc += m[(i, j)] * x[j];
        }
        *o = acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i = Matrix::identity(3, 3);
        assert!(rel_frobenius(&matrix_sqrt_psd(&i).unwrap(), &i) < 1e-14);
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 9.0]));
        let s = matrix_sqrt_psd(&m).unwrap();
        let expect = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]));
        assert!(rel_frobenius(&s, &expect) < 1e-14);
    }

    #[test]
    fn sqrt_round_trip_on_random_gram_matrix() {
        let a = Matrix::from_vec(4, 4, rng::standard_normals(4, 4, 3));
        let m = a.transpose() * &a;
        let s = matrix_sqrt_psd(&m).unwrap();
        assert!(rel_frobenius(&(&s * &s), &m) < 1e-10);
        assert!(is_symmetric(&s));
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(matrix_sqrt_psd(&asym), Err(Error::InvalidMatrix(_))));
        let indef = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(matches!(matrix_sqrt_psd(&indef), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn clamps_roundoff_negative_eigenvalues() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let s = matrix_sqrt_psd(&m).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
    }

    #[test]
    fn spd_inverse_flags_singular() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(SpdInverse::new(&m).unwrap().is_none());
        let m = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let inv = SpdInverse::new(&m).unwrap().unwrap();
        assert!((inv.inverse[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((inv.log_det - 0.0).abs() < 1e-15);
        assert!((inv.condition - 4.0).abs() < 1e-12);
    }
}
