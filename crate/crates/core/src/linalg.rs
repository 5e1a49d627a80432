//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::TOL_PSD;

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn check_symmetric(g: &DMatrix<f64>) -> Result<()> {
    if g.nrows() != g.ncols() {
        return Err(Error::dim(format!("matrix is {}x{}, expected square", g.nrows(), g.ncols())));
    }
    let scale = g.amax().max(f64::MIN_POSITIVE);
    for i in 0..g.nrows() {
        for j in 0..i {
            if (g[(i, j)] - g[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::invalid("matrix is not symmetric"));
            }
        }
    }
    Ok(())
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clipped to zero.
pub fn matrix_sqrt_psd(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(g)?;
    let eig = SymmetricEigen::new(symmetrize(g));
    let max = eig.eigenvalues.amax();
    if eig.eigenvalues.min() < -TOL_PSD * max.max(1.0) * 1e2 {
        return Err(Error::invalid("matrix is not positive semi-definite"));
    }
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

/// Eigen-decomposition of a symmetric matrix `(values, vectors)`.
pub(crate) fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(a));
    (eig.eigenvalues, eig.eigenvectors)
}

/// Raises eigenvalues below `floor_rel · λ_max` to that floor. Returns the
/// adjusted matrix and whether any eigenvalue moved.
pub(crate) fn clip_eigen_floor(a: &DMatrix<f64>, floor_rel: f64) -> (DMatrix<f64>, bool) {
    let (vals, vecs) = sym_eigen(a);
    let max = vals.max();
    let floor = floor_rel * max.max(0.0);
    let clipped = vals.iter().any(|&v| v < floor);
    if !clipped {
        return (symmetrize(a), false);
    }
    let vals = vals.map(|v| v.max(floor));
    (&vecs * DMatrix::from_diagonal(&vals) * vecs.transpose(), true)
}

/// Inverse of a symmetric positive-definite matrix.
pub(crate) fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    symmetrize(a)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::numeric(format!("matrix is not positive definite (condition {:.3e})", condition(a))))
}

pub(crate) fn condition(a: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(a);
    let (lo, hi) = (vals.min(), vals.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// `log Σ exp(v)` without overflow.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Serializes a matrix as a list of rows.
pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).norm() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.0]));
        let s = matrix_sqrt_psd(&d).unwrap();
        assert!((s - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]))).norm() < 1e-14);
    }

    #[test]
    fn sqrt_rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matrix_sqrt_psd(&a).is_err());
    }

    #[test]
    fn log_sum_exp_handles_underflow() {
        let v = [-1000.0, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn eigen_floor_clips_small_values() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-3]));
        let (b, clipped) = clip_eigen_floor(&a, 1e-8);
        assert!(clipped);
        assert!((b[(1, 1)] - 1e-8).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn sqrt_multiplies_back(a in prop::collection::vec(-3.0..3.0f64, 9)) {
            let a = DMatrix::from_vec(3, 3, a);
            let g = &a * a.transpose();
            let s = matrix_sqrt_psd(&g).unwrap();
            let err = (&s * &s - &g).norm() / g.norm().max(1e-300);
            prop_assert!(err < 1e-10);
        }
    }
}
