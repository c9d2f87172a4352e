//! Regression kernels shared by the estimators: LASSO with cross-validated
//! penalties, minimum-norm OLS and Newey–West mean inference.

mod hac;
mod lasso;
mod ols;

pub use hac::{autocovariance, long_run_variance, newey_west, Lags, NeweyWest};
pub use lasso::{
    cv_lasso_curve, cv_lasso_lambda, cv_lasso_lambda_with, default_lambda_grid, lasso_fit,
    soft_threshold, LassoFit, LassoOptions, StandardizedProblem,
};
pub(crate) use lasso::{fit_problem, log_grid};
pub use ols::{ols_fit, rank_tolerance, OlsFit};
