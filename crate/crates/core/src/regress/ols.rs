//! Minimum-norm least squares through the SVD.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::thin_svd;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rank: usize,
}

/// Singular values below `max(n, d) · ε · σ_max` count as zero.
pub fn rank_tolerance(n: usize, d: usize, sigma_max: f64) -> f64 {
    n.max(d) as f64 * f64::EPSILON * sigma_max
}

pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (n, d) = x.shape();
    if n == 0 || d == 0 {
        return Err(Error::Input(format!("ols needs n >= 1 and d >= 1, got {n}x{d}")));
    }
    if y.len() != n {
        return Err(Error::Input(format!("design has {n} rows, response has {}", y.len())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in ols input".into()));
    }
    let svd = thin_svd(x)?;
    let tol = rank_tolerance(n, d, svd.singular[0]);
    let uty = svd.u.tr_mul(y);
    let mut coef = DVector::zeros(d);
    let mut rank = 0;
    for (i, &s) in svd.singular.iter().enumerate() {
        if s > tol && s > 0.0 {
            rank += 1;
            coef.axpy(uty[i] / s, &svd.v.column(i), 1.0);
        }
    }
    let residuals = y - x * &coef;
    Ok(OlsFit { coef, residuals, rank })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn identity_design() {
        let fit = ols_fit(&DMatrix::identity(3, 3), &DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(fit.rank, 3);
        assert!((fit.coef - DVector::from_vec(vec![1.0, 2.0, 3.0])).norm() < 1e-14);
        assert!(fit.residuals.norm() < 1e-14);
    }

    #[test]
    fn duplicated_column_matches_deduplicated_fit() {
        let mut rng = rng_from(1);
        let base = DMatrix::from_fn(20, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut dup = DMatrix::zeros(20, 3);
        dup.columns_mut(0, 2).copy_from(&base);
        dup.column_mut(2).copy_from(&base.column(1));
        let y = DVector::from_fn(20, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = ols_fit(&dup, &y).unwrap();
        let b = ols_fit(&base, &y).unwrap();
        assert_eq!(a.rank, 2);
        assert!(((&dup * &a.coef) - (&base * &b.coef)).norm() < 1e-8);
        // minimum norm splits the duplicated weight evenly
        assert!((a.coef[1] - a.coef[2]).abs() < 1e-10);
    }

    #[test]
    fn matches_normal_equations() {
        let mut rng = rng_from(2);
        let x = DMatrix::from_fn(100, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(100, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fit = ols_fit(&x, &y).unwrap();
        let normal = x.tr_mul(&x).cholesky().unwrap().solve(&x.tr_mul(&y));
        assert!((fit.coef - normal).norm() < 1e-8);
        // residuals orthogonal to regressors
        assert!(x.tr_mul(&fit.residuals).norm() <= 1e-8 * y.norm());
    }

    #[test]
    fn wide_design_gives_min_norm_interpolant() {
        let mut rng = rng_from(3);
        let x = DMatrix::from_fn(3, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let fit = ols_fit(&x, &y).unwrap();
        assert_eq!(fit.rank, 3);
        assert!(fit.residuals.norm() < 1e-10);
        let pinv = x.transpose() * (&x * x.transpose()).try_inverse().unwrap();
        assert!((fit.coef - pinv * y).norm() < 1e-10);
    }

    #[test]
    fn rank_deficient_design_matches_pseudoinverse() {
        // oracle: Moore-Penrose pseudoinverse built from the symmetric eigen-solver
        for seed in 0..20 {
            let mut rng = rng_from(100 + seed);
            let base = DMatrix::from_fn(60, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mix = DMatrix::from_fn(2, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &base * &mix;
            let y = DVector::from_fn(60, |_, _| rng.sample::<f64, _>(StandardNormal));
            let fit = ols_fit(&x, &y).unwrap();
            assert_eq!(fit.rank, 2);
            let eig = x.tr_mul(&x).symmetric_eigen();
            let top = eig.eigenvalues.amax();
            let mut pinv = DMatrix::zeros(5, 5);
            for (i, &l) in eig.eigenvalues.iter().enumerate() {
                if l > 1e-10 * top {
                    let v = eig.eigenvectors.column(i);
                    pinv += &v * v.transpose() / l;
                }
            }
            let oracle = pinv * x.tr_mul(&y);
            assert!((&fit.coef - &oracle).norm() <= 1e-8 * (1.0 + oracle.norm()));
        }
    }

    #[test]
    fn non_finite_rejected() {
        let x = DMatrix::from_element(2, 1, f64::INFINITY);
        assert!(ols_fit(&x, &DVector::zeros(2)).is_err());
    }
}
