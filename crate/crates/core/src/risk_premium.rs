//! Three-pass risk premium of an observable factor: PCA of the demeaned
//! characteristic-portfolio matrix for innovations and loadings, a
//! cross-sectional regression of average returns for the latent premia, and a
//! time-series regression of the observable factor on the innovations.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dsl::CharPortfolioMatrix;
use crate::error::{Error, Result};
use crate::factor::{max_row_l1, pca_decompose_matrix, soft_threshold_rows, Decomposition, FactorModelFit, ThresholdMode};
use crate::linalg::thin_svd;
use crate::panel::Panel;
use crate::regress::{ols_fit, rank_tolerance};

/// Observable factor keyed by week: the value at week `t` is the factor
/// realized over `t → t + 1`, aligned with the return stored at week `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableFactorSeries {
    pub name: String,
    pub weeks: Vec<u32>,
    pub values: Vec<f64>,
}

impl ObservableFactorSeries {
    pub fn new(name: impl Into<String>, weeks: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if weeks.len() != values.len() {
            return Err(Error::Input(format!("{} weeks vs {} values", weeks.len(), values.len())));
        }
        if weeks.is_empty() {
            return Err(Error::EmptyPanel("observable factor series is empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite factor value at week {}", weeks[i])));
        }
        let mut pairs: Vec<(u32, f64)> = weeks.into_iter().zip(values).collect();
        pairs.sort_by_key(|&(w, _)| w);
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Input(format!("week {} appears twice in the factor series", w[0].0)));
        }
        let (weeks, values) = pairs.into_iter().unzip();
        Ok(Self { name: name.into(), weeks, values })
    }

    /// Values at `weeks`, all of which must be present.
    pub fn aligned(&self, weeks: &[u32]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(weeks.len());
        for (i, w) in weeks.iter().enumerate() {
            let pos = self
                .weeks
                .binary_search(w)
                .map_err(|_| Error::Input(format!("factor series '{}' has no value for week {w}", self.name)))?;
            out[i] = self.values[pos];
        }
        Ok(out)
    }
}

/// Two-column CSV with a header: week, value.
pub fn load_factor_series(path: impl AsRef<Path>) -> Result<ObservableFactorSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 {
        return Err(Error::Schema(format!("factor series needs 2 columns (week, value), found {}", headers.len())));
    }
    let name = headers[1].to_string();
    let (mut weeks, mut values) = (Vec::new(), Vec::new());
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let week: u32 = record[0]
            .parse()
            .map_err(|_| Error::Input(format!("line {}: bad week '{}'", line + 2, &record[0])))?;
        let value: f64 = record[1]
            .parse()
            .map_err(|_| Error::Input(format!("line {}: bad value '{}'", line + 2, &record[1])))?;
        weeks.push(week);
        values.push(value);
    }
    ObservableFactorSeries::new(name, weeks, values)
}

/// Subtracts each column's time-series mean.
pub fn demean_char_portfolios(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if c.nrows() < 2 {
        return Err(Error::Input(format!("demeaning needs T >= 2 rows, got {}", c.nrows())));
    }
    let means = c.row_mean();
    let mut out = c.clone();
    for mut row in out.row_iter_mut() {
        row -= &means;
    }
    Ok(out)
}

/// `V̂` (factors) and `Γ̂ᴰ` (loadings) of the demeaned matrix.
pub fn estimate_innovations(c_demeaned: &DMatrix<f64>, k: usize) -> Result<Decomposition> {
    pca_decompose_matrix(c_demeaned, k)
}

/// Per-asset time averages of characteristics and returns over `weeks`, for
/// assets observed in at least `min_coverage` of those weeks.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSectionMeans {
    pub assets: Vec<String>,
    pub z_bar: DMatrix<f64>,
    pub r_bar: DVector<f64>,
}

pub fn cross_section_means(panel: &Panel, weeks: &[u32], min_coverage: f64) -> Result<CrossSectionMeans> {
    if !(0.0..=1.0).contains(&min_coverage) {
        return Err(Error::Input(format!("min_coverage must lie in [0, 1], got {min_coverage}")));
    }
    let p = panel.n_chars();
    let mut sums: BTreeMap<&str, (usize, Vec<f64>, f64)> = BTreeMap::new();
    for &w in weeks {
        let Some(pos) = panel.week_position(w) else { continue };
        for row in panel.week_rows(pos) {
            let e = sums.entry(row.asset_id.as_str()).or_insert_with(|| (0, vec![0.0; p], 0.0));
            e.0 += 1;
            for (acc, z) in e.1.iter_mut().zip(&row.chars) {
                *acc += z;
            }
            e.2 += row.ret;
        }
    }
    let need = min_coverage * weeks.len() as f64;
    let kept: Vec<(&str, &(usize, Vec<f64>, f64))> =
        sums.iter().filter(|(_, v)| v.0 >= 1 && v.0 as f64 >= need).map(|(k, v)| (*k, v)).collect();
    if kept.is_empty() {
        return Err(Error::EmptyPanel(format!("no asset observed in at least {:.0}% of weeks", 100.0 * min_coverage)));
    }
    let n = kept.len();
    let z_bar = DMatrix::from_fn(n, p, |i, j| kept[i].1 .1[j] / kept[i].1 .0 as f64);
    let r_bar = DVector::from_fn(n, |i, _| kept[i].1 .2 / kept[i].1 .0 as f64);
    Ok(CrossSectionMeans { assets: kept.iter().map(|(a, _)| a.to_string()).collect(), z_bar, r_bar })
}

/// Columns of `m` carrying weight in its numerical null space.
fn null_columns(m: &DMatrix<f64>) -> Result<Vec<usize>> {
    let svd = thin_svd(m)?;
    let tol = rank_tolerance(m.nrows(), m.ncols(), svd.singular[0].max(f64::MIN_POSITIVE));
    let mut cols = Vec::new();
    for (i, &s) in svd.singular.iter().enumerate() {
        if s <= tol {
            for j in 0..m.ncols() {
                if svd.v[(j, i)].abs() > 1e-8 && !cols.contains(&j) {
                    cols.push(j);
                }
            }
        }
    }
    if m.nrows() < m.ncols() {
        // the thin factorization omits the trailing null directions
        cols = (0..m.ncols()).collect();
    }
    cols.sort_unstable();
    Ok(cols)
}

/// `γ̂` from the no-intercept regression of `r̄` on `β̄̂ = Z̄ Γ̌ᴰ`.
pub fn estimate_gamma(means: &CrossSectionMeans, gamma_check_d: &DMatrix<f64>) -> Result<DVector<f64>> {
    if gamma_check_d.nrows() != means.z_bar.ncols() {
        return Err(Error::Input(format!(
            "loadings have {} rows, characteristics {}",
            gamma_check_d.nrows(),
            means.z_bar.ncols()
        )));
    }
    let beta_bar = &means.z_bar * gamma_check_d;
    let k = beta_bar.ncols();
    let fit = ols_fit(&beta_bar, &means.r_bar)?;
    if fit.rank < k {
        let cols = null_columns(&beta_bar)?;
        return Err(Error::Rank(format!(
            "average exposures have rank {} < k = {k}; offending factor columns {:?}",
            fit.rank, cols
        )));
    }
    Ok(fit.coef)
}

/// `η̂` from the no-intercept regression of `g` on `V̂`.
pub fn estimate_eta(v_hat: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    if v_hat.nrows() != g.len() {
        return Err(Error::Input(format!("{} innovation rows vs {} factor values", v_hat.nrows(), g.len())));
    }
    let fit = ols_fit(v_hat, g)?;
    if fit.rank < v_hat.ncols() {
        return Err(Error::Rank(format!("innovations have rank {} < k = {}", fit.rank, v_hat.ncols())));
    }
    Ok(fit.coef)
}

/// Solves `mᵀ x = b` for a symmetric positive definite `m`.
fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let tol = rank_tolerance(m.nrows(), m.ncols(), top);
    if top <= 0.0 || eig.eigenvalues.iter().any(|&l| l <= tol) {
        return Err(Error::Rank(format!("{what} is singular")));
    }
    m.clone()
        .cholesky()
        .map(|c| c.solve(b))
        .ok_or_else(|| Error::Rank(format!("{what} is not positive definite")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlugInVariance {
    pub sigma_g: f64,
    /// `σ̂²_g` before clipping at zero.
    pub sigma2_raw: f64,
    pub clipped: bool,
}

/// Inputs of the plug-in variance, all on the weeks of `v_hat`.
pub struct PlugInInputs<'a> {
    pub v_hat: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub eta: &'a DVector<f64>,
    pub gamma: &'a DVector<f64>,
    pub gamma_check_d: &'a DMatrix<f64>,
    pub means: &'a CrossSectionMeans,
    pub panel: &'a Panel,
    pub weeks: &'a [u32],
    /// Bartlett lags for the long-run covariance of the scores; 0 is the plain
    /// second moment.
    pub hac_lags: usize,
}

/// Per-week `Π̂_t = Γ̌ᵀ (N⁻¹ Σ_i z̄_i z_{i,t}ᵀ) Γ̌` over the assets in `means`.
pub fn exposure_covariances(
    panel: &Panel,
    weeks: &[u32],
    means: &CrossSectionMeans,
    gamma_check_d: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let index: BTreeMap<&str, usize> = means.assets.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    let n = means.assets.len() as f64;
    let p = panel.n_chars();
    let zbar_g = &means.z_bar * gamma_check_d;
    weeks
        .iter()
        .map(|&w| {
            let mut cross = DMatrix::zeros(gamma_check_d.ncols(), p);
            if let Some(pos) = panel.week_position(w) {
                for row in panel.week_rows(pos) {
                    if let Some(&i) = index.get(row.asset_id.as_str()) {
                        let z = DVector::from_column_slice(&row.chars);
                        cross += zbar_g.row(i).transpose() * z.transpose();
                    }
                }
            }
            cross / n * gamma_check_d
        })
        .collect()
}

pub fn plug_in_sigma_g(inputs: &PlugInInputs<'_>) -> Result<PlugInVariance> {
    let v = inputs.v_hat;
    let (t, k) = v.shape();
    if inputs.g.len() != t || inputs.weeks.len() != t {
        return Err(Error::Input("plug-in inputs disagree on T".into()));
    }
    if inputs.hac_lags >= t {
        return Err(Error::Input(format!("hac_lags ({}) must be < T ({t})", inputs.hac_lags)));
    }
    let tf = t as f64;
    let n = inputs.means.assets.len() as f64;
    let a_mat = v.tr_mul(v) / tf;
    let zg = &inputs.means.z_bar * inputs.gamma_check_d;
    let b_mat = zg.tr_mul(&zg) / n;
    let a1 = solve_spd(&a_mat.transpose(), inputs.gamma, "innovation second moment A")?;
    let a2 = solve_spd(&b_mat.transpose(), inputs.eta, "exposure second moment B")?;
    let weights = {
        let mut w = DVector::zeros(2 * k);
        w.rows_mut(0, k).copy_from(&a1);
        w.rows_mut(k, k).copy_from(&a2);
        w
    };

    let resid = inputs.g - v * inputs.eta;
    let pis = exposure_covariances(inputs.panel, inputs.weeks, inputs.means, inputs.gamma_check_d);
    // scores ξ_t = (v̂_t ε̂ᵍ_t, Π̂_t v̂_t) projected on the delta-method weights
    let scores: Vec<f64> = (0..t)
        .map(|s| {
            let vt = v.row(s).transpose();
            let first = &vt * resid[s];
            let second = &pis[s] * &vt;
            weights.rows(0, k).dot(&first) + weights.rows(k, k).dot(&second)
        })
        .collect();
    let mut sigma2 = scores.iter().map(|x| x * x).sum::<f64>() / tf;
    for l in 1..=inputs.hac_lags {
        let w = 1.0 - l as f64 / (inputs.hac_lags + 1) as f64;
        let cov: f64 = (l..t).map(|s| scores[s] * scores[s - l]).sum::<f64>() / tf;
        sigma2 += 2.0 * w * cov;
    }
    let clipped = sigma2 < 0.0;
    Ok(PlugInVariance { sigma_g: sigma2.max(0.0).sqrt(), sigma2_raw: sigma2, clipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PremiumOptions {
    pub alpha: f64,
    pub hac_lags: usize,
    /// Minimum fraction of weeks an asset must be observed in to enter the
    /// cross-sectional pass.
    pub min_coverage: f64,
}

impl Default for PremiumOptions {
    fn default() -> Self {
        Self { alpha: 0.05, hac_lags: 0, min_coverage: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPremiumEstimate {
    pub factor: String,
    pub gamma_g: f64,
    pub sigma_g: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    pub pvalue: Option<f64>,
    /// Number of weeks in the time-series pass.
    pub t: usize,
    pub n_assets: usize,
    pub weeks: Vec<u32>,
    #[serde(with = "crate::serde_matrix::vector")]
    pub gamma: DVector<f64>,
    #[serde(with = "crate::serde_matrix::vector")]
    pub eta: DVector<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub v_hat: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub gamma_check_d: DMatrix<f64>,
    pub threshold_ratio: f64,
    pub sigma2_raw: f64,
    pub hac_lags: usize,
    pub warnings: Vec<String>,
}

/// `(γ̂, η̂, γ̂_g)` from innovations and thresholded loadings.
pub fn premium_from_components(
    v_hat: &DMatrix<f64>,
    gamma_check_d: &DMatrix<f64>,
    means: &CrossSectionMeans,
    g: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let gamma = estimate_gamma(means, gamma_check_d)?;
    let eta = estimate_eta(v_hat, g)?;
    let gamma_g = eta.dot(&gamma);
    Ok((gamma, eta, gamma_g))
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn two_sided_pvalue(z: f64) -> f64 {
    2.0 * Normal::standard().cdf(-z.abs())
}

/// Full three-pass estimate with `k` factors and loadings thresholded at
/// `threshold_ratio` times their largest row ℓ1 norm.
pub fn risk_premium(
    c_hat: &CharPortfolioMatrix,
    panel: &Panel,
    g: &ObservableFactorSeries,
    k: usize,
    threshold_ratio: f64,
    mode: ThresholdMode,
    opts: &PremiumOptions,
) -> Result<RiskPremiumEstimate> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::Input(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
    }
    if !(threshold_ratio.is_finite() && (0.0..1.0).contains(&threshold_ratio)) {
        return Err(Error::Input(format!("threshold ratio must lie in [0, 1), got {threshold_ratio}")));
    }
    let (c, weeks) = c_hat.complete_submatrix();
    let c_d = demean_char_portfolios(&c)?;
    let dec = estimate_innovations(&c_d, k)?;
    let gamma_check_d = soft_threshold_rows(&dec.loadings, threshold_ratio * max_row_l1(&dec.loadings), mode);
    let means = cross_section_means(panel, &weeks, opts.min_coverage)?;
    let g_vec = g.aligned(&weeks)?;
    let (gamma, eta, gamma_g) = premium_from_components(&dec.factors, &gamma_check_d, &means, &g_vec)?;
    let var = plug_in_sigma_g(&PlugInInputs {
        v_hat: &dec.factors,
        g: &g_vec,
        eta: &eta,
        gamma: &gamma,
        gamma_check_d: &gamma_check_d,
        means: &means,
        panel,
        weeks: &weeks,
        hac_lags: opts.hac_lags,
    })?;
    let mut warnings = Vec::new();
    if var.clipped {
        warnings.push(format!("negative plug-in variance {:e} clipped to 0", var.sigma2_raw));
    }
    let t = weeks.len();
    let half = normal_quantile(1.0 - opts.alpha / 2.0) * var.sigma_g / (t as f64).sqrt();
    let pvalue = (var.sigma_g > 0.0).then(|| two_sided_pvalue((t as f64).sqrt() * gamma_g / var.sigma_g));
    Ok(RiskPremiumEstimate {
        factor: g.name.clone(),
        gamma_g,
        sigma_g: var.sigma_g,
        ci: (gamma_g - half, gamma_g + half),
        alpha: opts.alpha,
        pvalue,
        t,
        n_assets: means.assets.len(),
        weeks,
        gamma,
        eta,
        v_hat: dec.factors,
        gamma_check_d,
        threshold_ratio,
        sigma2_raw: var.sigma2_raw,
        hac_lags: opts.hac_lags,
        warnings,
    })
}

/// Risk premium using the factor count, threshold ratio and mode of `fit`.
pub fn risk_premium_from_fit(
    fit: &FactorModelFit,
    panel: &Panel,
    g: &ObservableFactorSeries,
    opts: &PremiumOptions,
) -> Result<RiskPremiumEstimate> {
    risk_premium(&fit.c_hat, panel, g, fit.k, fit.threshold_ratio, fit.mode, opts)
}
