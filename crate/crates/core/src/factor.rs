//! Latent factors and row-sparse loadings from the characteristic-portfolio
//! matrix: PCA, row soft-thresholding, factor-count selection and return
//! prediction.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsl::{build_char_portfolio_matrix, CharPortfolioMatrix, DslConfig};
use crate::error::{Error, Result};
use crate::linalg::{thin_svd, ThinSvd};
use crate::panel::Panel;

/// Residual mean squares below this are treated as this value inside the log.
pub const IC_FLOOR: f64 = 1e-12;

/// `F̂` (`T × k`, `F̂ᵀF̂/T = I`), `Γ̂ = T⁻¹ĈᵀF̂` (`p × k`) and the leading
/// eigenvalues of `(Tp)⁻¹ĈĈᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub factors: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub eigvals: Vec<f64>,
}

fn sorted_svd(c: &DMatrix<f64>) -> Result<ThinSvd> {
    if c.nrows() == 0 || c.ncols() == 0 {
        return Err(Error::Input("empty characteristic-portfolio matrix".into()));
    }
    thin_svd(c)
}

/// Whether component `idx` (0-based) clears the relative eigenvalue floor
/// `eigval[idx] / eigval[0] ≥ ε · T · p`.
fn is_numerically_present(singular: &[f64], idx: usize, t: usize, p: usize) -> bool {
    let top = singular[0] * singular[0];
    if top <= 0.0 || idx >= singular.len() {
        return false;
    }
    singular[idx] * singular[idx] / top >= f64::EPSILON * (t * p) as f64
}

/// PCA of a fully observed `T × p` matrix.
pub fn pca_decompose_matrix(c: &DMatrix<f64>, k: usize) -> Result<Decomposition> {
    let (t, p) = c.shape();
    if k == 0 || k > t.min(p) {
        return Err(Error::Input(format!("k must lie in 1..={}, got {k}", t.min(p))));
    }
    let svd = sorted_svd(c)?;
    if !is_numerically_present(&svd.singular, k - 1, t, p) {
        let rank = (0..svd.singular.len()).take_while(|&i| is_numerically_present(&svd.singular, i, t, p)).count();
        return Err(Error::Rank(format!("k = {k} exceeds the numerical rank {rank} of the matrix")));
    }
    let mut u = svd.u.columns(0, k).into_owned();
    for mut col in u.column_iter_mut() {
        let mut pivot = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
    }
    let factors = u * (t as f64).sqrt();
    let loadings = c.tr_mul(&factors) / t as f64;
    let scale = (t * p) as f64;
    let eigvals = svd.singular[..k].iter().map(|s| s * s / scale).collect();
    Ok(Decomposition { factors, loadings, eigvals })
}

/// PCA over the fully valid weeks of `c_hat`; returns the week labels kept.
pub fn pca_decompose(c_hat: &CharPortfolioMatrix, k: usize) -> Result<(Decomposition, Vec<u32>)> {
    let (c, weeks) = c_hat.complete_submatrix();
    if weeks.is_empty() {
        return Err(Error::Estimation("no fully valid week in the characteristic-portfolio matrix".into()));
    }
    Ok((pca_decompose_matrix(&c, k)?, weeks))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Row scaled by `(m − λ)₊ / m` with `m` its ℓ1 norm.
    #[default]
    GroupSoft,
    /// Row zeroed iff `m ≤ λ`, otherwise kept.
    Hard,
}

/// # Panics
/// If `lambda` is negative or NaN.
pub fn soft_threshold_rows(loadings: &DMatrix<f64>, lambda: f64, mode: ThresholdMode) -> DMatrix<f64> {
    assert!(lambda >= 0.0, "threshold must be >= 0, got {lambda}");
    let mut out = loadings.clone();
    for mut row in out.row_iter_mut() {
        let m: f64 = row.iter().map(|v| v.abs()).sum();
        if m <= lambda {
            row.fill(0.0);
        } else if mode == ThresholdMode::GroupSoft {
            row *= (m - lambda) / m;
        }
    }
    out
}

/// Largest row ℓ1 norm.
pub fn max_row_l1(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn nonzero_rows(m: &DMatrix<f64>) -> usize {
    m.row_iter().filter(|r| r.iter().any(|&v| v != 0.0)).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCountSelection {
    pub k_hat: usize,
    /// `IC(k)` for `k = 1..`; candidates beyond the numerical rank are left out.
    pub ic: Vec<f64>,
}

/// `argmin_k log V(k) + k (p+T)/(pT) log(pT/(p+T))` over `1..=k_bar`.
pub fn estimate_num_factors_matrix(c: &DMatrix<f64>, k_bar: usize) -> Result<FactorCountSelection> {
    let (t, p) = c.shape();
    if k_bar == 0 || k_bar + 1 > t.min(p) {
        return Err(Error::Input(format!("k_bar must lie in 1..={}, got {k_bar}", t.min(p).saturating_sub(1))));
    }
    let svd = sorted_svd(c)?;
    if !is_numerically_present(&svd.singular, 0, t, p) {
        return Err(Error::Rank("matrix is numerically zero; no factor to select".into()));
    }
    let (tf, pf) = (t as f64, p as f64);
    let penalty = (pf + tf) / (pf * tf) * (pf * tf / (pf + tf)).ln();
    let squares: Vec<f64> = svd.singular.iter().map(|s| s * s).collect();
    let mut ic = Vec::with_capacity(k_bar);
    for k in 1..=k_bar {
        if !is_numerically_present(&svd.singular, k - 1, t, p) {
            break;
        }
        let tail: f64 = squares[k..].iter().sum();
        let v = (tail / (pf * tf)).max(IC_FLOOR);
        ic.push(v.ln() + k as f64 * penalty);
    }
    let mut best = 0;
    for (i, &v) in ic.iter().enumerate() {
        if v < ic[best] {
            best = i;
        }
    }
    Ok(FactorCountSelection { k_hat: best + 1, ic })
}

pub fn estimate_num_factors(c_hat: &CharPortfolioMatrix, k_bar: usize) -> Result<FactorCountSelection> {
    let (c, weeks) = c_hat.complete_submatrix();
    if weeks.is_empty() {
        return Err(Error::Estimation("no fully valid week in the characteristic-portfolio matrix".into()));
    }
    estimate_num_factors_matrix(&c, k_bar)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FactorCount {
    Fixed { k: usize },
    /// IC selection over `1..=k_bar`, capped at `min(T, p) − 1`.
    Auto { k_bar: usize },
}

impl Default for FactorCount {
    fn default() -> Self {
        FactorCount::Auto { k_bar: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ThresholdPolicy {
    /// Absolute threshold and moving-average window.
    Fixed { lambda: f64, window: usize },
    /// Joint choice of `ratio` (threshold as a fraction of the largest row ℓ1
    /// norm) and window by out-of-sample predictive R² over the last
    /// `validation_fraction` of the complete weeks.
    CrossValidated {
        #[serde(default = "default_ratios")]
        ratios: Vec<f64>,
        #[serde(default = "default_windows")]
        windows: Vec<usize>,
        #[serde(default = "default_validation_fraction")]
        validation_fraction: f64,
    },
    /// `λ = multiplier · k · max_j σ̂_j · sqrt(2 ln(p k) / T)` with `σ̂_j` the
    /// root mean square of column `j` of `Ĉ − F̂ Γ̂ᵀ`: a bound on the row ℓ1
    /// noise of `Γ̂` that shrinks with the estimation error of `Ĉ`.
    NoiseScaled { multiplier: f64, window: usize },
}

fn default_ratios() -> Vec<f64> {
    (0..20).map(|i| i as f64 / 20.0).collect()
}

fn default_windows() -> Vec<usize> {
    vec![1, 4, 13, 26, 52]
}

fn default_validation_fraction() -> f64 {
    0.2
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::CrossValidated {
            ratios: default_ratios(),
            windows: default_windows(),
            validation_fraction: default_validation_fraction(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub dsl: DslConfig,
    pub k: FactorCount,
    pub threshold: ThresholdPolicy,
    pub mode: ThresholdMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub ratio: f64,
    pub window: usize,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModelFit {
    pub char_names: Vec<String>,
    /// Week labels of the rows of `f_hat`.
    pub weeks: Vec<u32>,
    #[serde(with = "crate::serde_matrix")]
    pub f_hat: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub gamma_hat: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub gamma_check: DMatrix<f64>,
    pub k: usize,
    pub threshold_lambda: f64,
    /// `threshold_lambda` over the largest row ℓ1 norm of `gamma_hat`.
    pub threshold_ratio: f64,
    pub mode: ThresholdMode,
    pub window: usize,
    pub eigvals: Vec<f64>,
    pub ic: Option<Vec<f64>>,
    pub cv: Vec<CvScore>,
    /// Weeks dropped from PCA for holding an invalid cell.
    pub dropped_weeks: Vec<u32>,
    pub warnings: Vec<String>,
    pub c_hat: CharPortfolioMatrix,
}

/// Double selection lasso, factor count, PCA and thresholding on `panel`.
pub fn fit_dslfm(panel: &Panel, opts: &FitOptions) -> Result<FactorModelFit> {
    let c_hat = build_char_portfolio_matrix(panel, &opts.dsl)?;
    fit_from_matrix(c_hat, panel, opts)
}

/// Everything after the double selection step. `panel` supplies the
/// characteristics and returns used to cross-validate the threshold.
pub fn fit_from_matrix(c_hat: CharPortfolioMatrix, panel: &Panel, opts: &FitOptions) -> Result<FactorModelFit> {
    let (c, weeks) = c_hat.complete_submatrix();
    let dropped_weeks: Vec<u32> =
        (0..c_hat.n_weeks()).filter(|&i| !c_hat.row_is_complete(i)).map(|i| c_hat.weeks[i]).collect();
    let (t, p) = c.shape();
    let mut warnings = Vec::new();
    if t == 0 {
        return Err(Error::Estimation("no fully valid week in the characteristic-portfolio matrix".into()));
    }

    let (k, ic) = match opts.k {
        FactorCount::Fixed { k } => (k, None),
        FactorCount::Auto { k_bar } => {
            let cap = t.min(p).saturating_sub(1);
            if cap == 0 {
                return Err(Error::Estimation(format!("cannot select k from a {t}x{p} matrix")));
            }
            if k_bar > cap {
                warnings.push(format!("k_bar {k_bar} capped at {cap}"));
            }
            let sel = estimate_num_factors_matrix(&c, k_bar.min(cap))?;
            (sel.k_hat, Some(sel.ic))
        }
    };
    if k == 0 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    if t < k + 2 {
        return Err(Error::Estimation(format!("{t} fully valid weeks, need at least k + 2 = {}", k + 2)));
    }
    let dec = pca_decompose_matrix(&c, k)?;
    let top = max_row_l1(&dec.loadings);

    let (threshold_lambda, window, cv) = match &opts.threshold {
        ThresholdPolicy::Fixed { lambda, window } => {
            if !(lambda.is_finite() && *lambda >= 0.0) || *window == 0 {
                return Err(Error::Input(format!("fixed threshold needs lambda >= 0 and window >= 1, got {lambda}, {window}")));
            }
            (*lambda, *window, Vec::new())
        }
        ThresholdPolicy::NoiseScaled { multiplier, window } => {
            if !(multiplier.is_finite() && *multiplier >= 0.0) || *window == 0 {
                return Err(Error::Input(format!(
                    "noise-scaled threshold needs multiplier >= 0 and window >= 1, got {multiplier}, {window}"
                )));
            }
            (multiplier * noise_threshold(&c, &dec), *window, Vec::new())
        }
        ThresholdPolicy::CrossValidated { ratios, windows, validation_fraction } => {
            let admissible = admissible_ratios(&dec.loadings, ratios, k, opts.mode)?;
            let (ratio, window, cv) =
                cross_validate_threshold(&c, &weeks, panel, k, &admissible, windows, *validation_fraction, opts.mode)?;
            (ratio * top, window, cv)
        }
    };
    let gamma_check = soft_threshold_rows(&dec.loadings, threshold_lambda, opts.mode);
    if nonzero_rows(&gamma_check) == 0 {
        warnings.push("degenerate fit: every loading row was thresholded to zero".into());
    }
    let threshold_ratio = if top > 0.0 { threshold_lambda / top } else { 0.0 };
    Ok(FactorModelFit {
        char_names: c_hat.char_names.clone(),
        weeks,
        f_hat: dec.factors,
        gamma_hat: dec.loadings,
        gamma_check,
        k,
        threshold_lambda,
        threshold_ratio,
        mode: opts.mode,
        window,
        eigvals: dec.eigvals,
        ic,
        cv,
        dropped_weeks,
        warnings,
        c_hat,
    })
}

/// Unit-multiplier threshold of [`ThresholdPolicy::NoiseScaled`].
pub fn noise_threshold(c: &DMatrix<f64>, dec: &Decomposition) -> f64 {
    let (t, p) = c.shape();
    let k = dec.loadings.ncols();
    let resid = c - &dec.factors * dec.loadings.transpose();
    let sigma = resid.column_iter().map(|col| (col.norm_squared() / t as f64).sqrt()).fold(0.0, f64::max);
    k as f64 * sigma * (2.0 * ((p * k) as f64).ln().max(1.0) / t as f64).sqrt()
}

/// Ratios in `[0, 1)` that keep at least `min(k, nonzero rows)` rows alive.
fn admissible_ratios(loadings: &DMatrix<f64>, ratios: &[f64], k: usize, mode: ThresholdMode) -> Result<Vec<f64>> {
    if ratios.is_empty() || ratios.iter().any(|r| !(r.is_finite() && (0.0..1.0).contains(r))) {
        return Err(Error::Input("threshold ratios must be non-empty and lie in [0, 1)".into()));
    }
    let top = max_row_l1(loadings);
    let need = k.min(nonzero_rows(loadings));
    let kept: Vec<f64> = ratios
        .iter()
        .copied()
        .filter(|&q| nonzero_rows(&soft_threshold_rows(loadings, q * top, mode)) >= need)
        .collect();
    if kept.is_empty() {
        return Ok(vec![0.0]);
    }
    Ok(kept)
}

/// Expanding-window validation: for each validation week the factors and
/// loadings are re-estimated from the complete weeks strictly before it.
#[allow(clippy::too_many_arguments)]
fn cross_validate_threshold(
    c: &DMatrix<f64>,
    weeks: &[u32],
    panel: &Panel,
    k: usize,
    ratios: &[f64],
    windows: &[usize],
    validation_fraction: f64,
    mode: ThresholdMode,
) -> Result<(f64, usize, Vec<CvScore>)> {
    if windows.is_empty() || windows.contains(&0) {
        return Err(Error::Input("windows must be non-empty and >= 1".into()));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Input(format!("validation_fraction must lie in (0, 1), got {validation_fraction}")));
    }
    let t = weeks.len();
    let n_val = ((validation_fraction * t as f64).ceil() as usize).max(1);
    let start = t.saturating_sub(n_val).max(k + 2);
    if start >= t {
        return Err(Error::Estimation(format!(
            "{t} complete weeks leave no validation week after {} training weeks",
            k + 2
        )));
    }

    let per_week: Vec<Option<(Vec<f64>, f64)>> = (start..t)
        .into_par_iter()
        .map(|i| -> Result<Option<(Vec<f64>, f64)>> {
            let Some(pos) = panel.week_position(weeks[i]) else { return Ok(None) };
            let train = c.rows(0, i).into_owned();
            let dec = match pca_decompose_matrix(&train, k) {
                Ok(d) => d,
                Err(Error::Rank(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let (z, r) = panel.cross_section(pos);
            let top = max_row_l1(&dec.loadings);
            let mut sse = Vec::with_capacity(ratios.len() * windows.len());
            for &q in ratios {
                let gamma = soft_threshold_rows(&dec.loadings, q * top, mode);
                for &w in windows {
                    let lambda = trailing_mean(&dec.factors, i, w);
                    let pred = &z * (&gamma * lambda);
                    sse.push((&r - pred).norm_squared());
                }
            }
            Ok(Some((sse, r.norm_squared())))
        })
        .collect::<Result<_>>()?;

    let mut sse = vec![0.0; ratios.len() * windows.len()];
    let mut ss = 0.0;
    for (cell, total) in per_week.into_iter().flatten() {
        for (acc, v) in sse.iter_mut().zip(cell) {
            *acc += v;
        }
        ss += total;
    }
    if ss <= 0.0 {
        return Err(Error::Degenerate("validation returns are identically zero".into()));
    }
    let mut scores = Vec::with_capacity(sse.len());
    for (a, &q) in ratios.iter().enumerate() {
        for (b, &w) in windows.iter().enumerate() {
            scores.push(CvScore { ratio: q, window: w, r2: 1.0 - sse[a * windows.len() + b] / ss });
        }
    }
    // ties keep the larger ratio, then the shorter window
    let mut best: Option<&CvScore> = None;
    for s in &scores {
        let better = match best {
            None => true,
            Some(b) => {
                s.r2 > b.r2 || (s.r2 == b.r2 && (s.ratio > b.ratio || (s.ratio == b.ratio && s.window < b.window)))
            }
        };
        if better {
            best = Some(s);
        }
    }
    let best = best.expect("non-empty grid");
    Ok((best.ratio, best.window, scores))
}

/// Mean of rows `end − min(w, end) .. end` of `factors`.
fn trailing_mean(factors: &DMatrix<f64>, end: usize, w: usize) -> DVector<f64> {
    let len = w.min(end);
    let block = factors.rows(end - len, len);
    block.row_sum().transpose() / len as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub asset_id: String,
    pub week: u32,
    /// Forecast of the return realized from `week` to `week + 1`.
    pub value: f64,
}

/// Predictions sorted by `(week, asset_id)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub window: usize,
    pub predictions: Vec<Prediction>,
    /// Panel weeks with no prior fitted factor.
    pub skipped_weeks: Vec<u32>,
}

impl PredictionSet {
    pub fn new(window: usize, mut predictions: Vec<Prediction>, skipped_weeks: Vec<u32>) -> Self {
        predictions.sort_by(|a, b| a.week.cmp(&b.week).then_with(|| a.asset_id.cmp(&b.asset_id)));
        Self { window, predictions, skipped_weeks }
    }

    pub fn get(&self, asset_id: &str, week: u32) -> Option<f64> {
        self.predictions
            .binary_search_by(|p| p.week.cmp(&week).then_with(|| p.asset_id.as_str().cmp(asset_id)))
            .ok()
            .map(|i| self.predictions[i].value)
    }

    pub fn weeks(&self) -> Vec<u32> {
        let mut w: Vec<u32> = self.predictions.iter().map(|p| p.week).collect();
        w.dedup();
        w
    }
}

/// `r̂_{i,t+1} = z_{i,t}ᵀ Γ̌ λ̂_t` with `λ̂_t` the mean of the last `window`
/// fitted factors from weeks before `t`.
pub fn predict_returns(fit: &FactorModelFit, panel: &Panel, window: usize) -> Result<PredictionSet> {
    if window == 0 {
        return Err(Error::Input("window must be >= 1".into()));
    }
    if panel.n_chars() != fit.gamma_check.nrows() {
        return Err(Error::Input(format!(
            "panel has {} characteristics, fit has {}",
            panel.n_chars(),
            fit.gamma_check.nrows()
        )));
    }
    let mut predictions = Vec::new();
    let mut skipped = Vec::new();
    for (pos, &week) in panel.weeks().iter().enumerate() {
        let end = fit.weeks.partition_point(|&w| w < week);
        if end == 0 {
            skipped.push(week);
            continue;
        }
        let weights = &fit.gamma_check * trailing_mean(&fit.f_hat, end, window);
        for row in panel.week_rows(pos) {
            let value: f64 = row.chars.iter().zip(weights.iter()).map(|(z, b)| z * b).sum();
            predictions.push(Prediction { asset_id: row.asset_id.clone(), week, value });
        }
    }
    Ok(PredictionSet::new(window, predictions, skipped))
}
