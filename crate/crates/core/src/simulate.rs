//! Monte Carlo engine: a latent-factor panel with known truth, rotation
//! alignment, and MSE / bias / variance summaries of the estimators.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{fit_dslfm, FactorCount, FitOptions, ThresholdPolicy};
use crate::linalg::thin_svd;
use crate::panel::{Panel, PanelRow};
use crate::regress::rank_tolerance;
use crate::risk_premium::{
    cross_section_means, normal_quantile, risk_premium_from_fit, ObservableFactorSeries, PremiumOptions,
};
use crate::seed::{derive_seed, rng_from};

/// Seed of the default nonzero loading rows, frozen so every run shares them.
pub const DEFAULT_LOADINGS_SEED: u64 = 0x5EED_1DAD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub t: usize,
    pub p: usize,
    pub k: usize,
    /// Nonzero loading rows; `max(k + 1, p / 10)` when unset.
    pub s: Option<usize>,
    pub draws: usize,
    pub target_r2_model: f64,
    pub target_r2_g: f64,
    /// `k × k` VAR(1) coefficients of the factor innovations; `0.3 · I` when unset.
    pub factor_var: Option<Vec<Vec<f64>>>,
    /// Innovation covariance of the factor VAR; identity when unset.
    pub factor_innovation_cov: Option<Vec<Vec<f64>>>,
    /// `p × p` VAR(1) coefficients of characteristic deviations; `0.3 · I` when unset.
    pub char_var: Option<Vec<Vec<f64>>>,
    pub char_innovation_sd: f64,
    /// Standard deviation of the per-asset characteristic means.
    pub char_mean_sd: f64,
    /// Latent premia; `0.1 · 0.5^j` when unset.
    pub gamma0: Option<Vec<f64>>,
    /// Observable factor exposures; `e₁` when unset.
    pub eta0: Option<Vec<f64>>,
    /// `p × k` loadings; first `s` rows standard normal otherwise.
    pub loadings: Option<Vec<Vec<f64>>>,
    pub loadings_seed: u64,
    pub burn_in: usize,
    pub seed: u64,
    /// Estimator settings; factor count fixed at `k` and a noise-scaled
    /// threshold when unset.
    pub fit: Option<FitOptions>,
    pub premium: PremiumOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 500,
            t: 100,
            p: 10,
            k: 3,
            s: None,
            draws: 200,
            target_r2_model: 0.2,
            target_r2_g: 0.4,
            factor_var: None,
            factor_innovation_cov: None,
            char_var: None,
            char_innovation_sd: 1.0,
            char_mean_sd: 1.0,
            gamma0: None,
            eta0: None,
            loadings: None,
            loadings_seed: DEFAULT_LOADINGS_SEED,
            burn_in: 100,
            seed: 0,
            fit: None,
            premium: PremiumOptions::default(),
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], r: usize, c: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Input(format!("{what} must be {r}x{c}")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{what} has a non-finite entry")));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

fn vector_of(values: &[f64], len: usize, what: &str) -> Result<DVector<f64>> {
    if values.len() != len || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{what} must hold {len} finite values")));
    }
    Ok(DVector::from_column_slice(values))
}

/// Standard-normal first `s` rows, zeros below.
pub fn default_loadings(p: usize, k: usize, s: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from(seed);
    let mut out = DMatrix::zeros(p, k);
    for i in 0..s.min(p) {
        for j in 0..k {
            out[(i, j)] = rng.sample(StandardNormal);
        }
    }
    out
}

/// Fully resolved data-generating process.
#[derive(Debug, Clone, PartialEq)]
pub struct Dgp {
    pub n: usize,
    pub t: usize,
    pub burn_in: usize,
    pub loadings: DMatrix<f64>,
    pub gamma0: DVector<f64>,
    pub eta0: DVector<f64>,
    pub factor_var: DMatrix<f64>,
    factor_shock: DMatrix<f64>,
    pub char_var: DMatrix<f64>,
    pub char_innovation_sd: f64,
    pub char_mean_sd: f64,
    pub factor_cov: DMatrix<f64>,
    pub char_cov: DMatrix<f64>,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Population second moment of the common return component.
    pub signal: f64,
    pub sigma_eps: f64,
    pub sigma_eps_g: f64,
}

/// Stationary covariance `Σ = A Σ Aᵀ + Q` by doubling; fails unless the
/// powers of `A` vanish.
pub fn stationary_covariance(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sigma = q.clone();
    let mut power = a.clone();
    for _ in 0..64 {
        sigma += &power * &sigma * power.transpose();
        power = &power * &power;
        if !power.iter().all(|v| v.is_finite()) || !sigma.iter().all(|v| v.is_finite()) {
            break;
        }
        if power.amax() < 1e-15 {
            return Ok((&sigma + sigma.transpose()) * 0.5);
        }
    }
    Err(Error::Calibration("VAR(1) is not stationary (spectral radius >= 1)".into()))
}

/// `L` with `L Lᵀ = m` for a positive semi-definite `m`.
fn psd_factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::Input(format!("{what} is not symmetric")));
    }
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * top.max(1.0)) {
        return Err(Error::Input(format!("{what} is not positive semi-definite")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

impl SimConfig {
    pub fn s(&self) -> usize {
        self.s.unwrap_or_else(|| (self.k + 1).max(self.p / 10))
    }

    pub fn fit_options(&self) -> FitOptions {
        self.fit.clone().unwrap_or_else(|| FitOptions {
            k: FactorCount::Fixed { k: self.k },
            threshold: ThresholdPolicy::NoiseScaled { multiplier: 1.0, window: 1 },
            ..FitOptions::default()
        })
    }

    fn check_r2(v: f64, what: &str) -> Result<()> {
        if v > 0.0 && v <= 1.0 {
            Ok(())
        } else {
            Err(Error::Input(format!("{what} must lie in (0, 1], got {v}")))
        }
    }

    /// Validates the configuration and solves for the noise variances.
    pub fn resolve(&self) -> Result<Dgp> {
        let (n, t, p, k) = (self.n, self.t, self.p, self.k);
        if n == 0 || t < 2 || p == 0 || k == 0 {
            return Err(Error::Input(format!("need n >= 1, t >= 2, p >= 1, k >= 1; got {n}, {t}, {p}, {k}")));
        }
        let s = self.s();
        if s > p {
            return Err(Error::Input(format!("s = {s} exceeds p = {p}")));
        }
        Self::check_r2(self.target_r2_model, "target_r2_model")?;
        Self::check_r2(self.target_r2_g, "target_r2_g")?;
        if !(self.char_innovation_sd >= 0.0 && self.char_mean_sd >= 0.0) {
            return Err(Error::Input("characteristic standard deviations must be >= 0".into()));
        }
        let loadings = match &self.loadings {
            Some(rows) => {
                let m = matrix_from_rows(rows, p, k, "loadings")?;
                let live = m.row_iter().filter(|r| r.iter().any(|&v| v != 0.0)).count();
                if self.s.is_some_and(|s| s != live) {
                    return Err(Error::Input(format!("loadings have {live} nonzero rows, s = {s}")));
                }
                m
            }
            None => default_loadings(p, k, s, self.loadings_seed),
        };
        let gamma0 = match &self.gamma0 {
            Some(v) => vector_of(v, k, "gamma0")?,
            None => DVector::from_fn(k, |j, _| 0.1 * 0.5f64.powi(j as i32)),
        };
        let eta0 = match &self.eta0 {
            Some(v) => vector_of(v, k, "eta0")?,
            None => DVector::from_fn(k, |j, _| if j == 0 { 1.0 } else { 0.0 }),
        };
        let factor_var = match &self.factor_var {
            Some(rows) => matrix_from_rows(rows, k, k, "factor_var")?,
            None => DMatrix::identity(k, k) * 0.3,
        };
        let factor_innov = match &self.factor_innovation_cov {
            Some(rows) => matrix_from_rows(rows, k, k, "factor_innovation_cov")?,
            None => DMatrix::identity(k, k),
        };
        let char_var = match &self.char_var {
            Some(rows) => matrix_from_rows(rows, p, p, "char_var")?,
            None => DMatrix::identity(p, p) * 0.3,
        };
        let factor_shock = psd_factor(&factor_innov, "factor_innovation_cov")?;
        let factor_cov = stationary_covariance(&factor_var, &factor_innov)?;
        let char_innov = DMatrix::identity(p, p) * self.char_innovation_sd.powi(2);
        let char_cov = stationary_covariance(&char_var, &char_innov)?;

        let z_moment = &char_cov + DMatrix::identity(p, p) * self.char_mean_sd.powi(2);
        let f_moment = &factor_cov + &gamma0 * gamma0.transpose();
        let signal = (loadings.transpose() * &z_moment * &loadings * &f_moment).trace();
        if !(signal > 0.0) {
            return Err(Error::Calibration("the common return component has zero variance".into()));
        }
        let g_signal = (eta0.transpose() * &factor_cov * &eta0)[(0, 0)];
        if !(g_signal > 0.0) && self.target_r2_g < 1.0 {
            return Err(Error::Calibration("eta0 carries no factor variance".into()));
        }
        let r2 = self.target_r2_model;
        let r2g = self.target_r2_g;
        let calibration = Calibration {
            signal,
            sigma_eps: (signal * (1.0 - r2) / r2).sqrt(),
            sigma_eps_g: (g_signal * (1.0 - r2g) / r2g).max(0.0).sqrt(),
        };
        Ok(Dgp {
            n,
            t,
            burn_in: self.burn_in,
            loadings,
            gamma0,
            eta0,
            factor_var,
            factor_shock,
            char_var,
            char_innovation_sd: self.char_innovation_sd,
            char_mean_sd: self.char_mean_sd,
            factor_cov,
            char_cov,
            calibration,
        })
    }
}

/// One simulated sample with its ground truth. Row `t` of `f0` is the factor
/// realized over week `t → t + 1`.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub f0: DMatrix<f64>,
    pub v0: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    /// `F⁰ Γ⁰ᵀ`.
    pub c0: DMatrix<f64>,
    pub gamma0: DVector<f64>,
    pub eta0: DVector<f64>,
    pub g: ObservableFactorSeries,
    pub panel: Panel,
}

impl SimTruth {
    pub fn gamma_g(&self) -> f64 {
        self.eta0.dot(&self.gamma0)
    }
}

fn standard_normals(rng: &mut impl Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

pub fn simulate_panel(cfg: &SimConfig, seed: u64) -> Result<SimTruth> {
    simulate_from(&cfg.resolve()?, seed)
}

pub fn simulate_from(dgp: &Dgp, seed: u64) -> Result<SimTruth> {
    let (n, t, k, p) = (dgp.n, dgp.t, dgp.gamma0.len(), dgp.loadings.nrows());
    let steps = dgp.burn_in + t;
    let mut rng = rng_from(seed);

    let mut v0 = DMatrix::zeros(t, k);
    let mut v = DVector::zeros(k);
    for step in 0..steps {
        v = &dgp.factor_var * &v + &dgp.factor_shock * standard_normals(&mut rng, k);
        if step >= dgp.burn_in {
            v0.set_row(step - dgp.burn_in, &v.transpose());
        }
    }
    let mut f0 = v0.clone();
    for mut row in f0.row_iter_mut() {
        row += dgp.gamma0.transpose();
    }
    let c0 = &f0 * dgp.loadings.transpose();
    let exposures = &dgp.loadings * f0.transpose();

    let eps_g = dgp.calibration.sigma_eps_g;
    let g: Vec<f64> = (0..t).map(|w| v0.row(w).dot(&dgp.eta0.transpose()) + eps_g * rng.sample::<f64, _>(StandardNormal)).collect();

    let width = (n.max(2) - 1).to_string().len();
    let mut rows = Vec::with_capacity(n * t);
    for i in 0..n {
        let asset_id = format!("a{i:0width$}");
        let mean = standard_normals(&mut rng, p) * dgp.char_mean_sd;
        let market_cap = rng.sample::<f64, _>(StandardNormal).exp();
        let mut dev = DVector::zeros(p);
        for step in 0..steps {
            dev = &dgp.char_var * &dev + standard_normals(&mut rng, p) * dgp.char_innovation_sd;
            if step < dgp.burn_in {
                continue;
            }
            let week = step - dgp.burn_in;
            let z = &mean + &dev;
            let common = z.dot(&exposures.column(week));
            let ret = common + dgp.calibration.sigma_eps * rng.sample::<f64, _>(StandardNormal);
            rows.push(PanelRow {
                asset_id: asset_id.clone(),
                week: week as u32,
                ret,
                chars: z.as_slice().to_vec(),
                market_cap: Some(market_cap),
            });
        }
    }
    let names = (0..p).map(|j| format!("z{j}")).collect();
    let panel = Panel::new(rows, names)?;
    let g = ObservableFactorSeries::new("g", (0..t as u32).collect(), g)?;
    Ok(SimTruth {
        f0,
        v0,
        loadings: dgp.loadings.clone(),
        c0,
        gamma0: dgp.gamma0.clone(),
        eta0: dgp.eta0.clone(),
        g,
        panel,
    })
}

fn check_full_rank(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.ncols() == 0 || m.nrows() < m.ncols() {
        return Err(Error::Rank(format!("{what} is {}x{}, not full column rank", m.nrows(), m.ncols())));
    }
    let svd = thin_svd(m)?;
    let tol = rank_tolerance(m.nrows(), m.ncols(), svd.singular[0]);
    let rank = svd.singular.iter().filter(|&&s| s > tol && s > 0.0).count();
    if rank < m.ncols() {
        return Err(Error::Rank(format!("{what} has rank {rank} < {}", m.ncols())));
    }
    Ok(())
}

/// `argmin_X ‖a X − b‖_F` for a full-column-rank `a`.
fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = thin_svd(a)?;
    let mut x = DMatrix::zeros(a.ncols(), b.ncols());
    let utb = svd.u.tr_mul(b);
    for (i, &s) in svd.singular.iter().enumerate() {
        x += svd.v.column(i) * (utb.row(i) / s);
    }
    Ok(x)
}

/// Best linear map of `truth` onto `est` and the remaining relative error
/// `min_H ‖est − truth H‖ / ‖truth‖`.
pub fn align_rotation(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if est.nrows() != truth.nrows() {
        return Err(Error::Input(format!("estimate has {} rows, truth {}", est.nrows(), truth.nrows())));
    }
    check_full_rank(est, "estimate")?;
    check_full_rank(truth, "truth")?;
    let h = least_squares(truth, est)?;
    let err = (est - truth * &h).norm() / truth.norm();
    Ok((h, err))
}

/// Estimates of one draw, in the coordinates of the estimator.
#[derive(Debug, Clone)]
pub struct DrawEstimates {
    pub gamma_check: DMatrix<f64>,
    pub f_hat: DMatrix<f64>,
    /// Weeks of the rows of `f_hat` and `c_hat`.
    pub weeks: Vec<u32>,
    pub c_hat: DMatrix<f64>,
    /// `β̄̂ γ̂` per asset of `assets`.
    pub fitted_mean_returns: DVector<f64>,
    pub assets: Vec<String>,
    pub gamma_g: f64,
    pub sigma_g: f64,
    pub k: usize,
}

/// The double selection latent factor estimator and its risk-premium pass.
pub fn dslfm_estimator(truth: &SimTruth, fit: &FitOptions, premium: &PremiumOptions) -> Result<DrawEstimates> {
    let model = fit_dslfm(&truth.panel, fit)?;
    let est = risk_premium_from_fit(&model, &truth.panel, &truth.g, premium)?;
    let means = cross_section_means(&truth.panel, &est.weeks, premium.min_coverage)?;
    let fitted = &means.z_bar * &est.gamma_check_d * &est.gamma;
    let (c_hat, _) = model.c_hat.complete_submatrix();
    Ok(DrawEstimates {
        gamma_check: model.gamma_check,
        f_hat: model.f_hat,
        weeks: model.weeks,
        c_hat,
        fitted_mean_returns: fitted,
        assets: means.assets,
        gamma_g: est.gamma_g,
        sigma_g: est.sigma_g,
        k: model.k,
    })
}

pub const ESTIMANDS: [&str; 5] = ["Gamma_beta", "F", "beta_bar", "C", "gamma_g"];

/// Per-draw deviations from the truth plus summary errors.
#[derive(Debug, Clone)]
struct DrawRecord {
    /// Per estimand: `est·G − truth` over `‖truth‖`, or the raw scalar gap for `γ_g`.
    deviations: Vec<DMatrix<f64>>,
    /// Rotation-aligned relative errors of `Γ̌`, `F̂`, then relative errors of `β̄̂γ̂` and `Ĉ`.
    errors: [f64; 4],
    covered90: bool,
    covered95: bool,
}

fn evaluate(truth: &SimTruth, est: &DrawEstimates, min_coverage: f64) -> Result<DrawRecord> {
    let t = truth.f0.nrows();
    if est.weeks.len() != t {
        return Err(Error::Estimation(format!("{} weeks dropped from the fit", t - est.weeks.len())));
    }
    let means = cross_section_means(&truth.panel, &est.weeks, min_coverage)?;
    if means.assets != est.assets {
        return Err(Error::Estimation("estimator used a different asset set".into()));
    }
    let true_fitted = &means.z_bar * &truth.loadings * &truth.gamma0;

    let aligned = |e: &DMatrix<f64>, tr: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        check_full_rank(e, "estimate")?;
        let g = least_squares(e, tr)?;
        Ok((e * g - tr) / tr.norm())
    };
    let gamma_dev = aligned(&est.gamma_check, &truth.loadings)?;
    let f_dev = aligned(&est.f_hat, &truth.f0)?;
    let beta_dev = DMatrix::from_column_slice(
        true_fitted.len(),
        1,
        ((&est.fitted_mean_returns - &true_fitted) / true_fitted.norm()).as_slice(),
    );
    let c_dev = (&est.c_hat - &truth.c0) / truth.c0.norm();
    let gap = est.gamma_g - truth.gamma_g();
    let (_, gamma_err) = align_rotation(&est.gamma_check, &truth.loadings)?;
    let (_, f_err) = align_rotation(&est.f_hat, &truth.f0)?;
    let se = est.sigma_g / (t as f64).sqrt();
    Ok(DrawRecord {
        errors: [gamma_err, f_err, beta_dev.norm(), c_dev.norm()],
        deviations: vec![gamma_dev, f_dev, beta_dev, c_dev, DMatrix::from_element(1, 1, gap)],
        covered90: gap.abs() <= normal_quantile(0.95) * se,
        covered95: gap.abs() <= normal_quantile(0.975) * se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandSummary {
    pub name: String,
    pub mse: f64,
    pub bias2: f64,
    pub var: f64,
}

/// `mean ‖D‖²`, `‖mean D‖²` and the population variance of the draws.
pub fn mse_decomposition(deviations: &[&DMatrix<f64>]) -> (f64, f64, f64) {
    let s = deviations.len() as f64;
    let mean = deviations.iter().skip(1).fold(deviations[0].clone(), |acc, d| acc + *d) / s;
    let mse = deviations.iter().map(|d| d.norm_squared()).sum::<f64>() / s;
    let var = deviations.iter().map(|d| (*d - &mean).norm_squared()).sum::<f64>() / s;
    (mse, mean.norm_squared(), var)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianErrors {
    pub gamma_beta_aligned: f64,
    pub f_aligned: f64,
    pub beta_bar_relative: f64,
    pub c_relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub calibration: Calibration,
    pub draws: usize,
    pub failed_draws: usize,
    pub failures: Vec<String>,
    pub estimands: Vec<EstimandSummary>,
    pub cov90: f64,
    pub cov95: f64,
    pub median_errors: MedianErrors,
}

impl SimReport {
    pub fn estimand(&self, name: &str) -> Option<&EstimandSummary> {
        self.estimands.iter().find(|e| e.name == name)
    }

    /// Aligned-text rendering: estimands by row, MSE / Bias² / Var by column.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>14} {:>14} {:>14}", "", "MSE", "Bias^2", "Var");
        for e in &self.estimands {
            let _ = writeln!(out, "{:<12} {:>14.6e} {:>14.6e} {:>14.6e}", e.name, e.mse, e.bias2, e.var);
        }
        let _ = writeln!(out, "{:<12} {:>14.3} {:>14.3}", "Cov90/Cov95", self.cov90, self.cov95);
        let _ = writeln!(
            out,
            "draws {} (failed {}), N = {}, T = {}, p = {}, k = {}, s = {}",
            self.draws,
            self.failed_draws,
            self.config.n,
            self.config.t,
            self.config.p,
            self.config.k,
            self.config.s()
        );
        out
    }
}

/// Monte Carlo with the default estimator.
pub fn run_monte_carlo(cfg: &SimConfig) -> Result<SimReport> {
    let fit = cfg.fit_options();
    let premium = cfg.premium.clone();
    run_monte_carlo_with(cfg, |truth, draw_seed| {
        let mut fit = fit.clone();
        fit.dsl.seed = draw_seed;
        dslfm_estimator(truth, &fit, &premium)
    })
}

/// Monte Carlo with a caller-supplied estimator, called with the truth and the
/// draw's seed.
pub fn run_monte_carlo_with<E>(cfg: &SimConfig, estimator: E) -> Result<SimReport>
where
    E: Fn(&SimTruth, u64) -> Result<DrawEstimates> + Sync,
{
    if cfg.draws < 2 {
        return Err(Error::Input(format!("need at least 2 draws, got {}", cfg.draws)));
    }
    let dgp = cfg.resolve()?;
    let outcomes: Vec<Result<DrawRecord>> = (0..cfg.draws)
        .into_par_iter()
        .map(|draw| {
            let seed = derive_seed(cfg.seed, &[draw as u64]);
            let truth = simulate_from(&dgp, seed)?;
            let est = estimator(&truth, derive_seed(seed, &[1]))?;
            evaluate(&truth, &est, cfg.premium.min_coverage)
        })
        .collect();

    let mut records = Vec::with_capacity(cfg.draws);
    let mut failures = Vec::new();
    for (draw, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => records.push(r),
            Err(e) => failures.push(format!("draw {draw}: {e}")),
        }
    }
    let failed = failures.len();
    if failed * 5 > cfg.draws || records.is_empty() {
        failures.truncate(10);
        return Err(Error::Suite { failed, total: cfg.draws, diagnostics: failures });
    }

    let estimands = ESTIMANDS
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let devs: Vec<&DMatrix<f64>> = records.iter().map(|r| &r.deviations[i]).collect();
            let (mse, bias2, var) = mse_decomposition(&devs);
            EstimandSummary { name: (*name).into(), mse, bias2, var }
        })
        .collect();
    let m = records.len() as f64;
    let column = |i: usize| median(&mut records.iter().map(|r| r.errors[i]).collect::<Vec<_>>());
    let median_errors = MedianErrors {
        gamma_beta_aligned: column(0),
        f_aligned: column(1),
        beta_bar_relative: column(2),
        c_relative: column(3),
    };
    Ok(SimReport {
        config: cfg.clone(),
        calibration: dgp.calibration,
        draws: cfg.draws,
        failed_draws: failed,
        failures,
        estimands,
        cov90: records.iter().filter(|r| r.covered90).count() as f64 / m,
        cov95: records.iter().filter(|r| r.covered95).count() as f64 / m,
        median_errors,
    })
}
