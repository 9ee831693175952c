//! Small dense symmetric kernels: SPD square roots and Cholesky-based solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative asymmetry above which a matrix is rejected as non-symmetric.
const SYMMETRY_TOL: f64 = 1e-10;

/// `V^{1/2}` and `V^{-1/2}` taken from one symmetric eigendecomposition.
#[derive(Debug, Clone)]
pub struct SpdSqrt {
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
}

pub fn check_symmetric(v: &DMatrix<f64>) -> Result<()> {
    if !v.is_square() {
        return Err(Error::input(format!(
            "matrix is {}x{}, expected square",
            v.nrows(),
            v.ncols()
        )));
    }
    let scale = v.norm().max(f64::MIN_POSITIVE);
    let asym = (v - v.transpose()).norm();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::input(format!(
            "matrix is not symmetric (relative asymmetry {:.3e})",
            asym / scale
        )));
    }
    Ok(())
}

/// Symmetric square root of an SPD matrix.
pub fn matrix_sqrt_spd(v: &DMatrix<f64>) -> Result<SpdSqrt> {
    check_symmetric(v)?;
    let sym = (v + v.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if !(min > 0.0) {
            return Err(Error::Numeric(format!(
                "matrix is not positive definite (min eigenvalue {min:e})"
            )));
        }
    }
    let q = &eig.eigenvectors;
    let roots = eig.eigenvalues.map(f64::sqrt);
    let sqrt = q * DMatrix::from_diagonal(&roots) * q.transpose();
    let inv_sqrt = q * DMatrix::from_diagonal(&roots.map(|r| 1.0 / r)) * q.transpose();
    Ok(SpdSqrt {
        sqrt: symmetrize(sqrt),
        inv_sqrt: symmetrize(inv_sqrt),
        eigenvalues: eig.eigenvalues,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

pub fn cholesky(v: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(v.clone())
        .ok_or_else(|| Error::Numeric("Cholesky factorization failed: matrix is not positive definite".into()))
}

/// `ln det V` from a Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// `x^T V^{-1} x` using a factorization of `V`.
pub fn inv_quad_form(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> f64 {
    // With V = L L^T, x^T V^{-1} x = ||L^{-1} x||^2.
    let y = chol
        .l_dirty()
        .solve_lower_triangular(x)
        .expect("Cholesky factor has a nonzero diagonal");
    y.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels;
    use crate::randomness::SeedPlan;

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut s = SeedPlan::new(seed, "linalg").derive_stream(labels!["spd", d]);
        let a = DMatrix::from_fn(d, d, |_, _| s.next_normal());
        &a * a.transpose() + DMatrix::identity(d, d)
    }

    #[test]
    fn identity_and_diagonal_roots() {
        let id = DMatrix::<f64>::identity(3, 3);
        let r = matrix_sqrt_spd(&id).unwrap();
        assert!((r.sqrt - &id).norm() < 1e-14);

        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = matrix_sqrt_spd(&v).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert!((r.sqrt - expected).norm() < 1e-14);
        let inv = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0 / 3.0]));
        assert!((r.inv_sqrt - inv).norm() < 1e-14);
    }

    #[test]
    fn random_spd_roots_square_back() {
        for d in 1..=8 {
            for seed in 0..5 {
                let v = random_spd(d, seed);
                let r = matrix_sqrt_spd(&v).unwrap();
                let err = (&r.sqrt * &r.sqrt - &v).norm();
                assert!(err <= 1e-8 * v.norm(), "d={d} err={err}");
                assert_eq!(r.sqrt, r.sqrt.transpose());
                let ident = &r.inv_sqrt * &r.sqrt;
                assert!((ident - DMatrix::identity(d, d)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let v = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.0, 2.0]);
        assert!(matches!(matrix_sqrt_spd(&v), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn indefinite_rejected() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(matrix_sqrt_spd(&v), Err(Error::Numeric(_))));
        assert!(cholesky(&v).is_err());
    }

    #[test]
    fn log_det_and_quad_form() {
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![100.0, 1.0]));
        let c = cholesky(&v).unwrap();
        assert!((log_det(&c) - 100f64.ln()).abs() < 1e-14);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert!((inv_quad_form(&c, &x) - 0.01).abs() < 1e-16);
    }
}
