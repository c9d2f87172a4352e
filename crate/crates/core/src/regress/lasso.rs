//! LASSO by cyclic coordinate descent with covariance updates.
//!
//! The design is standardized internally (columns centered and scaled to unit
//! population variance, response centered), which is equivalent to fitting an
//! unpenalized intercept. Coefficients are reported on the original scale.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Relative scale below which a column is treated as constant.
const CONSTANT_COLUMN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    /// Stop when the largest standardized coefficient change in a sweep is below
    /// `tol` times the response standard deviation.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iters: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub coef: DVector<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub active_set: Vec<usize>,
    pub n_iters: usize,
    /// False when `max_iters` was reached before the tolerance was met.
    pub converged: bool,
    /// Penalized objective after each sweep (standardized problem).
    pub objective_trace: Vec<f64>,
}

/// Sufficient statistics of a standardized regression problem.
#[derive(Debug, Clone)]
pub struct StandardizedProblem {
    pub n: usize,
    pub means: DVector<f64>,
    /// Population standard deviations; zero marks a constant column.
    pub scales: DVector<f64>,
    pub y_mean: f64,
    /// `X̃ᵀX̃ / n`.
    pub gram: DMatrix<f64>,
    /// `X̃ᵀỹ / n`.
    pub xty: DVector<f64>,
    /// `ỹᵀỹ / n`.
    pub yty: f64,
}

impl StandardizedProblem {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let (n, d) = x.shape();
        if y.len() != n {
            return Err(Error::Input(format!("design has {n} rows, response has {}", y.len())));
        }
        if n < 2 {
            return Err(Error::Input(format!("lasso needs at least 2 observations, got {n}")));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite value in lasso input".into()));
        }
        let nf = n as f64;
        let means = DVector::from_fn(d, |j, _| x.column(j).sum() / nf);
        let scales = DVector::from_fn(d, |j, _| {
            let m = means[j];
            let var = x.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / nf;
            let sd = var.sqrt();
            if sd <= CONSTANT_COLUMN_TOL * (1.0 + m.abs()) {
                0.0
            } else {
                sd
            }
        });
        let y_mean = y.sum() / nf;
        let xs = DMatrix::from_fn(n, d, |i, j| {
            if scales[j] > 0.0 {
                (x[(i, j)] - means[j]) / scales[j]
            } else {
                0.0
            }
        });
        let yc = y.add_scalar(-y_mean);
        let gram = xs.tr_mul(&xs) / nf;
        let xty = xs.tr_mul(&yc) / nf;
        let yty = yc.norm_squared() / nf;
        Ok(Self { n, means, scales, y_mean, gram, xty, yty })
    }

    pub fn n_features(&self) -> usize {
        self.means.len()
    }

    /// Smallest penalty at which every coefficient is zero.
    pub fn lambda_max(&self) -> f64 {
        self.xty.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn objective(&self, beta: &DVector<f64>, q: &DVector<f64>, lambda: f64) -> f64 {
        0.5 * self.yty - self.xty.dot(beta) + 0.5 * beta.dot(q) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    /// Coordinate descent on the standardized problem, warm-started from `beta`.
    pub fn solve(&self, lambda: f64, beta: &mut DVector<f64>, opts: &LassoOptions) -> Solve {
        let d = self.n_features();
        if lambda >= self.lambda_max() {
            beta.fill(0.0);
            let zero = self.objective(beta, &DVector::zeros(d), lambda);
            return Solve { iters: 0, converged: true, trace: vec![zero] };
        }
        let mut q = &self.gram * &*beta;
        let mut trace = Vec::new();
        let mut converged = d == 0;
        let mut iters = 0;
        let y_sd = self.yty.sqrt();
        let tol = opts.tol * if y_sd > 0.0 { y_sd } else { 1.0 };
        while !converged && iters < opts.max_iters {
            iters += 1;
            let mut max_delta = 0.0_f64;
            for j in 0..d {
                if self.scales[j] == 0.0 {
                    continue;
                }
                let gjj = self.gram[(j, j)];
                let rho = self.xty[j] - q[j] + gjj * beta[j];
                let new = soft_threshold(rho, lambda) / gjj;
                let delta = new - beta[j];
                if delta != 0.0 {
                    beta[j] = new;
                    q.axpy(delta, &self.gram.column(j), 1.0);
                    max_delta = max_delta.max(delta.abs());
                }
            }
            trace.push(self.objective(beta, &q, lambda));
            converged = max_delta < tol;
        }
        Solve { iters, converged, trace }
    }

    /// Maps a standardized coefficient vector back to `(coef, intercept)`.
    pub fn unstandardize(&self, beta: &DVector<f64>) -> (DVector<f64>, f64) {
        let coef = DVector::from_fn(beta.len(), |j, _| {
            if self.scales[j] > 0.0 {
                beta[j] / self.scales[j]
            } else {
                0.0
            }
        });
        let intercept = self.y_mean - coef.dot(&self.means);
        (coef, intercept)
    }

    /// `X̃ᵀ(ỹ − X̃β)/n`, the correlation of each standardized column with the residual.
    pub fn residual_correlation(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.xty - &self.gram * beta
    }
}

#[derive(Debug, Clone)]
pub struct Solve {
    pub iters: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

pub fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

/// Minimizes `(2n)⁻¹‖y − Xb‖² + λ‖b‖₁` over the standardized design.
pub fn lasso_fit(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, opts: &LassoOptions) -> Result<LassoFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Input(format!("lasso penalty must be finite and >= 0, got {lambda}")));
    }
    let problem = StandardizedProblem::new(x, y)?;
    Ok(fit_problem(&problem, lambda, opts))
}

pub(crate) fn fit_problem(problem: &StandardizedProblem, lambda: f64, opts: &LassoOptions) -> LassoFit {
    let mut beta = DVector::zeros(problem.n_features());
    let solve = problem.solve(lambda, &mut beta, opts);
    finish(problem, beta, lambda, solve)
}

fn finish(problem: &StandardizedProblem, beta: DVector<f64>, lambda: f64, solve: Solve) -> LassoFit {
    let (coef, intercept) = problem.unstandardize(&beta);
    let active_set = (0..coef.len()).filter(|&j| coef[j] != 0.0).collect();
    LassoFit {
        coef,
        intercept,
        lambda,
        active_set,
        n_iters: solve.iters,
        converged: solve.converged,
        objective_trace: solve.trace,
    }
}

/// Default penalty grid: `n_points` log-spaced values from `λ_max` down to
/// `ratio · λ_max`. Returns `[0.0]` when the response is orthogonal to every column.
pub fn default_lambda_grid(x: &DMatrix<f64>, y: &DVector<f64>, n_points: usize, ratio: f64) -> Result<Vec<f64>> {
    let lambda_max = StandardizedProblem::new(x, y)?.lambda_max();
    Ok(log_grid(lambda_max, n_points, ratio))
}

pub(crate) fn log_grid(lambda_max: f64, n_points: usize, ratio: f64) -> Vec<f64> {
    if lambda_max <= 0.0 || n_points == 0 {
        return vec![0.0];
    }
    if n_points == 1 {
        return vec![lambda_max];
    }
    let (hi, lo) = (lambda_max.ln(), (lambda_max * ratio).ln());
    let mut grid: Vec<f64> = (0..n_points)
        .map(|i| (hi + (lo - hi) * i as f64 / (n_points - 1) as f64).exp())
        .collect();
    grid[0] = lambda_max;
    grid[n_points - 1] = lambda_max * ratio;
    grid
}

/// Out-of-fold mean squared prediction error for each grid value.
pub fn cv_lasso_curve(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    n_folds: usize,
    grid: &[f64],
    seed: u64,
    opts: &LassoOptions,
) -> Result<Vec<f64>> {
    let (n, d) = x.shape();
    if grid.is_empty() {
        return Err(Error::Input("empty lambda grid".into()));
    }
    if grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Input("lambda grid values must be finite and >= 0".into()));
    }
    if n_folds < 2 || n < n_folds {
        return Err(Error::Input(format!("need 2 <= n_folds <= n, got n_folds={n_folds}, n={n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from(seed));

    let mut sse = vec![0.0; grid.len()];
    let base = n / n_folds;
    let extra = n % n_folds;
    let mut start = 0;
    for fold in 0..n_folds {
        let size = base + usize::from(fold < extra);
        let held = &perm[start..start + size];
        start += size;
        let mut is_held = vec![false; n];
        for &i in held {
            is_held[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|&i| !is_held[i]).collect();
        let x_train = x.select_rows(&train);
        let y_train = y.select_rows(&train);
        let problem = StandardizedProblem::new(&x_train, &y_train)?;
        let mut beta = DVector::zeros(d);
        for (g, &lambda) in grid.iter().enumerate() {
            problem.solve(lambda, &mut beta, opts);
            let (coef, intercept) = problem.unstandardize(&beta);
            for &i in held {
                let pred = intercept + x.row(i).transpose().dot(&coef);
                let e = y[i] - pred;
                sse[g] += e * e;
            }
        }
    }
    Ok(sse.into_iter().map(|s| s / n as f64).collect())
}

/// Grid penalty with the smallest out-of-fold error; ties keep the larger penalty.
pub fn cv_lasso_lambda(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    n_folds: usize,
    grid: &[f64],
    seed: u64,
) -> Result<f64> {
    cv_lasso_lambda_with(x, y, n_folds, grid, seed, &LassoOptions::default())
}

pub fn cv_lasso_lambda_with(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    n_folds: usize,
    grid: &[f64],
    seed: u64,
    opts: &LassoOptions,
) -> Result<f64> {
    let curve = cv_lasso_curve(x, y, n_folds, grid, seed, opts)?;
    let mut best = 0;
    for (g, &err) in curve.iter().enumerate() {
        let best_lambda = grid[best];
        if err < curve[best] || (err == curve[best] && grid[g] > best_lambda) {
            best = g;
        }
    }
    Ok(grid[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from(seed);
        DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
    }

    /// Columns centered and orthogonal with `XᵀX/n = I`.
    fn orthonormal_design(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut raw = gaussian(n, d, seed);
        for j in 0..d {
            let m = raw.column(j).mean();
            raw.column_mut(j).add_scalar_mut(-m);
        }
        let mut with_ones = DMatrix::from_element(n, d + 1, 1.0);
        with_ones.columns_mut(1, d).copy_from(&raw);
        let q = with_ones.qr().q();
        q.columns(1, d).into_owned() * (n as f64).sqrt()
    }

    /// Brute-force 1-D minimizer of `½(b − b_ols)² + λ|b|` over a fine grid.
    fn grid_minimizer(b_ols: f64, lambda: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        let steps = 200_000;
        for s in 0..=steps {
            let b = -2.0 + 4.0 * s as f64 / steps as f64;
            let obj = 0.5 * (b - b_ols).powi(2) + lambda * b.abs();
            if obj < best.0 {
                best = (obj, b);
            }
        }
        best.1
    }

    #[test]
    fn orthonormal_soft_threshold_example() {
        let n = 64;
        let x = orthonormal_design(n, 3, 1);
        let b_true = DVector::from_vec(vec![0.5, -0.1, 0.0]);
        let y = &x * &b_true;
        let fit = lasso_fit(&x, &y, 0.3, &LassoOptions::default()).unwrap();
        // frozen from the brute-force grid minimizer: 0.2, 0.0, 0.0
        assert!((grid_minimizer(0.5, 0.3) - 0.2).abs() < 1e-4);
        assert!((fit.coef[0] - 0.2).abs() < 1e-6, "{}", fit.coef[0]);
        assert_eq!(fit.coef[1], 0.0);
        assert_eq!(fit.active_set, vec![0]);
    }

    #[test]
    fn zero_penalty_is_ols() {
        let x = gaussian(50, 4, 2);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0]);
        let mut rng = rng_from(3);
        let y = &x * &b + DVector::from_fn(50, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let fit = lasso_fit(&x, &y, 0.0, &LassoOptions { tol: 1e-12, max_iters: 100_000 }).unwrap();
        let mut design = DMatrix::from_element(50, 5, 1.0);
        design.columns_mut(1, 4).copy_from(&x);
        let ols = design.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        for j in 0..4 {
            assert!((fit.coef[j] - ols[j + 1]).abs() < 1e-6);
        }
        assert!((fit.intercept - ols[0]).abs() < 1e-6);
    }

    #[test]
    fn lambda_max_zeroes_everything() {
        let x = gaussian(40, 5, 4);
        let y = DVector::from_fn(40, |i, _| x[(i, 0)] + 0.3 * x[(i, 2)]);
        let problem = StandardizedProblem::new(&x, &y).unwrap();
        let fit = lasso_fit(&x, &y, problem.lambda_max(), &LassoOptions::default()).unwrap();
        assert!(fit.active_set.is_empty());
        assert!(fit.coef.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn constant_column_gets_zero_slope() {
        let mut x = gaussian(30, 3, 5);
        x.column_mut(1).fill(4.2);
        let y = DVector::from_fn(30, |i, _| 2.0 * x[(i, 0)]);
        let fit = lasso_fit(&x, &y, 0.01, &LassoOptions::default()).unwrap();
        assert_eq!(fit.coef[1], 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        let mut x = gaussian(10, 2, 6);
        x[(3, 1)] = f64::NAN;
        let y = DVector::zeros(10);
        assert!(matches!(lasso_fit(&x, &y, 0.1, &LassoOptions::default()), Err(Error::Input(_))));
    }

    #[test]
    fn max_iters_flags_non_convergence() {
        let x = gaussian(30, 6, 7);
        let y = DVector::from_fn(30, |i, _| x[(i, 0)] - x[(i, 1)]);
        let fit = lasso_fit(&x, &y, 1e-4, &LassoOptions { tol: 1e-15, max_iters: 1 }).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.n_iters, 1);
    }

    #[test]
    fn cv_noiseless_prefers_smallest_penalty() {
        let x = gaussian(60, 4, 8);
        let y = DVector::from_fn(60, |i, _| x[(i, 0)] - 0.7 * x[(i, 2)] + 0.4 * x[(i, 3)]);
        // direct evaluation of the out-of-fold curve is strictly decreasing here
        let curve = cv_lasso_curve(&x, &y, 5, &[1.0, 0.1, 1e-6], 11, &LassoOptions::default()).unwrap();
        assert!(curve[0] > curve[1] && curve[1] > curve[2]);
        assert_eq!(cv_lasso_lambda(&x, &y, 5, &[1.0, 0.1, 1e-6], 11).unwrap(), 1e-6);
    }

    #[test]
    fn cv_pure_noise_prefers_heavy_penalty() {
        let mut wins = 0;
        for rep in 0..50 {
            let x = gaussian(40, 8, 100 + rep);
            let mut rng = rng_from(500 + rep);
            let y = DVector::from_fn(40, |_, _| rng.sample::<f64, _>(StandardNormal));
            if cv_lasso_lambda(&x, &y, 5, &[10.0, 1e-6], rep).unwrap() == 10.0 {
                wins += 1;
            }
        }
        assert!(wins > 25, "heavy penalty chosen in {wins}/50 replications");
    }

    #[test]
    fn cv_leave_one_out_boundary() {
        let x = gaussian(5, 2, 9);
        let y = DVector::from_fn(5, |i, _| x[(i, 0)]);
        let grid = [0.5, 0.05, 0.005];
        let chosen = cv_lasso_lambda(&x, &y, 5, &grid, 1).unwrap();
        assert!(grid.contains(&chosen));
        assert!(matches!(cv_lasso_lambda(&x, &y, 5, &[], 1), Err(Error::Input(_))));
    }

    #[test]
    fn cv_is_deterministic_given_seed() {
        let x = gaussian(50, 5, 10);
        let y = DVector::from_fn(50, |i, _| x[(i, 1)] + 0.5 * x[(i, 4)]);
        let grid = default_lambda_grid(&x, &y, 20, 1e-3).unwrap();
        let a = cv_lasso_curve(&x, &y, 5, &grid, 42, &LassoOptions::default()).unwrap();
        let b = cv_lasso_curve(&x, &y, 5, &grid, 42, &LassoOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_grid_shape() {
        let grid = log_grid(2.0, 50, 1e-4);
        assert_eq!(grid.len(), 50);
        assert!((grid[0] - 2.0).abs() < 1e-12);
        assert!((grid[49] - 2e-4).abs() < 1e-15);
        assert!(grid.windows(2).all(|w| w[0] > w[1]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kkt_and_objective_bounds(seed in 0u64..10_000, frac in 0.01f64..0.9) {
            let x = gaussian(40, 6, seed);
            let mut rng = rng_from(seed + 1);
            let b = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &x * &b + DVector::from_fn(40, |_, _| rng.sample::<f64, _>(StandardNormal));
            let problem = StandardizedProblem::new(&x, &y).unwrap();
            let lambda = frac * problem.lambda_max();
            let opts = LassoOptions::default();
            let mut beta = DVector::zeros(6);
            let solve = problem.solve(lambda, &mut beta, &opts);
            prop_assert!(solve.converged);
            let grad = problem.residual_correlation(&beta);
            let tol = 1e-6;
            for j in 0..6 {
                if beta[j] == 0.0 {
                    prop_assert!(grad[j].abs() <= lambda + tol);
                } else {
                    prop_assert!((grad[j] - lambda * beta[j].signum()).abs() <= tol);
                }
            }
            for w in solve.trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            let zero = DVector::zeros(6);
            let obj = |v: &DVector<f64>| problem.objective(v, &(&problem.gram * v), lambda);
            prop_assert!(obj(&beta) <= obj(&zero) + 1e-12);
            let mut ols = DVector::zeros(6);
            problem.solve(0.0, &mut ols, &LassoOptions { tol: 1e-12, max_iters: 100_000 });
            prop_assert!(obj(&beta) <= obj(&ols) + 1e-9);
        }

        #[test]
        fn orthonormal_supports_are_nested(seed in 0u64..10_000, l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
            let x = orthonormal_design(32, 5, seed);
            let mut rng = rng_from(seed);
            let b = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &x * &b;
            let (hi, lo) = if l1 > l2 { (l1, l2) } else { (l2, l1) };
            let opts = LassoOptions::default();
            let a_hi = lasso_fit(&x, &y, hi, &opts).unwrap().active_set;
            let a_lo = lasso_fit(&x, &y, lo, &opts).unwrap().active_set;
            prop_assert!(a_hi.iter().all(|j| a_lo.contains(j)));
        }
    }
}
