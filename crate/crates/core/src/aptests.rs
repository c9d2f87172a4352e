//! Asset-pricing test statistics: predictive R², characteristic importance
//! with a week bootstrap, and the risk-premium z-test.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsl::CharPortfolioMatrix;
use crate::error::{Error, Result};
use crate::factor::{
    fit_dslfm, fit_from_matrix, max_row_l1, nonzero_rows, pca_decompose_matrix, soft_threshold_rows, FactorModelFit,
    FitOptions, PredictionSet, ThresholdMode,
};
use crate::panel::Panel;
use crate::risk_premium::{normal_quantile, two_sided_pvalue, RiskPremiumEstimate};
use crate::seed::{derive_seed, rng_from};

pub const TEST_LEVELS: [f64; 3] = [0.10, 0.05, 0.01];

/// `1 − Σ(r − r̂)² / Σ r²` over the panel cells that carry a prediction.
pub fn predictive_r2(predictions: &PredictionSet, panel: &Panel) -> Result<f64> {
    let (mut sse, mut sst, mut cells) = (0.0, 0.0, 0usize);
    for row in panel.rows() {
        if let Some(pred) = predictions.get(&row.asset_id, row.week) {
            sse += (row.ret - pred).powi(2);
            sst += row.ret * row.ret;
            cells += 1;
        }
    }
    if cells == 0 {
        return Err(Error::Input("empty overlap: no panel cell has a prediction".into()));
    }
    if sst == 0.0 {
        return Err(Error::Degenerate("every overlapping realized return is zero".into()));
    }
    Ok(1.0 - sse / sst)
}

/// Number of stars for a two-sided z-statistic at 10/5/1%.
pub fn stars(z: f64) -> u8 {
    TEST_LEVELS.iter().filter(|&&a| z.abs() >= normal_quantile(1.0 - a / 2.0)).count() as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharImportance {
    pub name: String,
    /// Squared norm of the characteristic's thresholded loading row.
    pub w: f64,
    pub se: f64,
    pub z: Option<f64>,
    pub stars: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharImportanceReport {
    pub chars: Vec<CharImportance>,
    pub draws: usize,
    /// Draws whose refit failed and were left out of the standard errors.
    pub failed_draws: usize,
    /// Draws in which every loading row was thresholded to zero.
    pub degenerate_draws: usize,
    pub k: usize,
    pub threshold_ratio: f64,
    pub seed: u64,
    pub warnings: Vec<String>,
}

fn importance_weights(loadings: &DMatrix<f64>) -> Vec<f64> {
    loadings.row_iter().map(|r| r.norm_squared()).collect()
}

/// Thresholded loadings of `c` at `ratio` times the largest row ℓ1 norm.
fn thresholded_loadings(c: &DMatrix<f64>, k: usize, ratio: f64, mode: ThresholdMode) -> Result<DMatrix<f64>> {
    let dec = pca_decompose_matrix(c, k)?;
    let lambda = ratio * max_row_l1(&dec.loadings);
    Ok(soft_threshold_rows(&dec.loadings, lambda, mode))
}

/// Week bootstrap around an existing fit. Each draw resamples the complete
/// rows of the fit's characteristic-portfolio matrix with replacement and
/// re-estimates the thresholded loadings with the fit's `k`, threshold ratio
/// and mode.
pub fn char_importance_from_fit(fit: &FactorModelFit, draws: usize, seed: u64) -> Result<CharImportanceReport> {
    if draws < 2 {
        return Err(Error::Input(format!("bootstrap needs B >= 2 draws, got {draws}")));
    }
    let (c, _) = fit.c_hat.complete_submatrix();
    let t = c.nrows();
    let point = importance_weights(&fit.gamma_check);
    let p = point.len();

    let outcomes: Vec<Result<Vec<f64>>> = (0..draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_from(derive_seed(seed, &[b as u64]));
            let rows: Vec<usize> = (0..t).map(|_| rng.random_range(0..t)).collect();
            let resampled = c.select_rows(&rows);
            let loadings = thresholded_loadings(&resampled, fit.k, fit.threshold_ratio, fit.mode)?;
            Ok(importance_weights(&loadings))
        })
        .collect();

    let mut warnings = Vec::new();
    if draws < 30 {
        warnings.push(format!("only {draws} bootstrap draws; standard errors are unreliable"));
    }
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(draws);
    let mut failed = 0;
    for (b, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(w) => samples.push(w),
            Err(e) => {
                failed += 1;
                if failed <= 3 {
                    warnings.push(format!("draw {b} failed: {e}"));
                }
            }
        }
    }
    let degenerate = samples.iter().filter(|w| w.iter().all(|&x| x == 0.0)).count();
    if degenerate == draws {
        return Err(Error::Degenerate(format!("all {draws} bootstrap draws thresholded every loading row to zero")));
    }
    if samples.len() < 2 {
        return Err(Error::Degenerate(format!("only {} of {draws} bootstrap draws succeeded", samples.len())));
    }
    if failed > 0 {
        warnings.push(format!("{failed} of {draws} bootstrap draws failed and were excluded"));
    }

    let m = samples.len() as f64;
    let chars = (0..p)
        .map(|j| {
            let mean = samples.iter().map(|w| w[j]).sum::<f64>() / m;
            let var = samples.iter().map(|w| (w[j] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            let se = var.sqrt();
            let z = (se > 0.0).then(|| point[j] / se);
            CharImportance {
                name: fit.char_names[j].clone(),
                w: point[j],
                se,
                z,
                stars: z.map_or(0, stars),
            }
        })
        .collect();
    Ok(CharImportanceReport {
        chars,
        draws,
        failed_draws: failed,
        degenerate_draws: degenerate,
        k: fit.k,
        threshold_ratio: fit.threshold_ratio,
        seed,
        warnings,
    })
}

/// Fits the model on `panel` and bootstraps the importance statistics.
pub fn char_importance(panel: &Panel, opts: &FitOptions, draws: usize, seed: u64) -> Result<CharImportanceReport> {
    if draws < 2 {
        return Err(Error::Input(format!("bootstrap needs B >= 2 draws, got {draws}")));
    }
    let fit = fit_dslfm(panel, opts)?;
    char_importance_from_fit(&fit, draws, seed)
}

/// As [`char_importance`] on an already estimated characteristic-portfolio
/// matrix.
pub fn char_importance_from_matrix(
    c_hat: CharPortfolioMatrix,
    panel: &Panel,
    opts: &FitOptions,
    draws: usize,
    seed: u64,
) -> Result<CharImportanceReport> {
    let fit = fit_from_matrix(c_hat, panel, opts)?;
    if nonzero_rows(&fit.gamma_check) == 0 {
        return Err(Error::Degenerate("point estimate has every loading row at zero".into()));
    }
    char_importance_from_fit(&fit, draws, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPremiumTest {
    pub tstat: f64,
    pub pvalue: f64,
    /// `(level, rejected)` at 10%, 5% and 1%.
    pub reject_at: Vec<(f64, bool)>,
}

/// z-test of a zero risk premium.
pub fn rp_test(estimate: &RiskPremiumEstimate) -> Result<RiskPremiumTest> {
    if !(estimate.sigma_g > 0.0) {
        return Err(Error::Degenerate("sigma_g is zero; the t-statistic is undefined".into()));
    }
    let tstat = (estimate.t as f64).sqrt() * estimate.gamma_g / estimate.sigma_g;
    let pvalue = two_sided_pvalue(tstat);
    let reject_at = TEST_LEVELS.iter().map(|&a| (a, pvalue < a)).collect();
    Ok(RiskPremiumTest { tstat, pvalue, reject_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::{FactorCount, Prediction, ThresholdPolicy};
    use crate::panel::PanelRow;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn toy_panel(rets: &[f64]) -> Panel {
        let rows = rets
            .iter()
            .enumerate()
            .map(|(i, &r)| PanelRow {
                asset_id: format!("a{}", i % 3),
                week: (i / 3) as u32,
                ret: r,
                chars: vec![0.0],
                market_cap: None,
            })
            .collect();
        Panel::new(rows, vec!["z".into()]).unwrap()
    }

    fn preds_for(panel: &Panel, values: &[f64]) -> PredictionSet {
        let preds = panel
            .rows()
            .iter()
            .zip(values)
            .map(|(r, &v)| Prediction { asset_id: r.asset_id.clone(), week: r.week, value: v })
            .collect();
        PredictionSet::new(1, preds, vec![])
    }

    const RETS: [f64; 6] = [0.02, -0.01, 0.03, 0.005, -0.02, 0.01];

    #[test]
    fn r2_examples() {
        let panel = toy_panel(&RETS);
        assert_eq!(predictive_r2(&preds_for(&panel, &[0.0; 6]), &panel).unwrap(), 0.0);
        let own: Vec<f64> = panel.rows().iter().map(|r| r.ret).collect();
        assert_eq!(predictive_r2(&preds_for(&panel, &own), &panel).unwrap(), 1.0);
        let neg: Vec<f64> = own.iter().map(|r| -r).collect();
        assert!((predictive_r2(&preds_for(&panel, &neg), &panel).unwrap() + 3.0).abs() < 1e-12);
    }

    #[test]
    fn r2_errors() {
        let panel = toy_panel(&RETS);
        let none = PredictionSet::new(1, vec![], vec![]);
        assert!(matches!(predictive_r2(&none, &panel), Err(Error::Input(_))));
        let zeros = toy_panel(&[0.0; 6]);
        assert!(matches!(predictive_r2(&preds_for(&zeros, &[0.1; 6]), &zeros), Err(Error::Degenerate(_))));
    }

    #[test]
    fn star_cutoffs() {
        assert_eq!(stars(1.0), 0);
        assert_eq!(stars(1.7), 1);
        assert_eq!(stars(-2.0), 2);
        assert_eq!(stars(3.0), 3);
    }

    fn estimate(gamma_g: f64, sigma_g: f64, t: usize) -> RiskPremiumEstimate {
        RiskPremiumEstimate {
            factor: "g".into(),
            gamma_g,
            sigma_g,
            ci: (gamma_g, gamma_g),
            alpha: 0.05,
            pvalue: None,
            t,
            n_assets: 1,
            weeks: vec![],
            gamma: DVector::zeros(1),
            eta: DVector::zeros(1),
            v_hat: DMatrix::zeros(0, 1),
            gamma_check_d: DMatrix::zeros(1, 1),
            threshold_ratio: 0.0,
            sigma2_raw: sigma_g * sigma_g,
            hac_lags: 0,
            warnings: vec![],
        }
    }

    #[test]
    fn rp_test_examples() {
        let zero = rp_test(&estimate(0.0, 1.0, 100)).unwrap();
        assert_eq!(zero.tstat, 0.0);
        assert!((zero.pvalue - 1.0).abs() < 1e-15);
        assert!(zero.reject_at.iter().all(|&(_, r)| !r));

        let edge = rp_test(&estimate(1.96, 10.0, 100)).unwrap();
        assert!((edge.tstat - 1.96).abs() < 1e-12);
        assert!((edge.pvalue - 0.05).abs() < 1e-3);
        assert_eq!(edge.reject_at, vec![(0.10, true), (0.05, true), (0.01, false)]);

        assert!(matches!(rp_test(&estimate(0.1, 0.0, 100)), Err(Error::Degenerate(_))));
    }

    fn sparse_matrix(seed: u64, t: usize) -> (CharPortfolioMatrix, Panel) {
        let mut rng = rng_from(seed);
        let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut gamma = normal(6, 2);
        gamma.row_mut(4).fill(0.0);
        gamma.row_mut(5).fill(0.0);
        let c = normal(t, 2) * gamma.transpose() + normal(t, 6) * 0.05;
        let names = (0..6).map(|j| format!("z{j}")).collect::<Vec<_>>();
        let rows = (0..t as u32)
            .flat_map(|w| {
                (0..3).map(move |i| PanelRow {
                    asset_id: format!("a{i}"),
                    week: w,
                    ret: 0.01 * i as f64,
                    chars: vec![0.0; 6],
                    market_cap: None,
                })
            })
            .collect();
        let panel = Panel::new(rows, names.clone()).unwrap();
        (CharPortfolioMatrix::from_complete(c, (0..t as u32).collect(), names).unwrap(), panel)
    }

    fn fixed_opts(lambda: f64) -> FitOptions {
        FitOptions {
            k: FactorCount::Fixed { k: 2 },
            threshold: ThresholdPolicy::Fixed { lambda, window: 1 },
            ..FitOptions::default()
        }
    }

    #[test]
    fn bootstrap_is_reproducible_and_nonnegative() {
        let (c, panel) = sparse_matrix(1, 60);
        let a = char_importance_from_matrix(c.clone(), &panel, &fixed_opts(0.3), 40, 9).unwrap();
        let b = char_importance_from_matrix(c, &panel, &fixed_opts(0.3), 40, 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.chars.iter().all(|c| c.w >= 0.0 && c.se >= 0.0));
        // signal rows are significant, thresholded rows are zero
        assert!(a.chars[..4].iter().all(|c| c.stars >= 1), "{:?}", a.chars);
        assert!(a.chars[4..].iter().all(|c| c.w == 0.0 && c.stars == 0));
    }

    #[test]
    fn small_b_warns() {
        let (c, panel) = sparse_matrix(2, 40);
        let r = char_importance_from_matrix(c, &panel, &fixed_opts(0.0), 2, 1).unwrap();
        assert_eq!(r.draws, 2);
        assert!(r.warnings.iter().any(|w| w.contains("2 bootstrap draws")));
        assert!(char_importance_from_matrix(sparse_matrix(2, 40).0, &panel, &fixed_opts(0.0), 1, 1).is_err());
    }

    #[test]
    fn duplicated_column_gets_equal_weight() {
        let (c, panel) = sparse_matrix(3, 50);
        let mut values = c.values.clone().insert_column(6, 0.0);
        let dup = values.column(0).into_owned();
        values.set_column(6, &dup);
        let names: Vec<String> = (0..7).map(|j| format!("z{j}")).collect();
        let dup_matrix = CharPortfolioMatrix::from_complete(values, c.weeks.clone(), names.clone()).unwrap();
        let rows = panel
            .rows()
            .iter()
            .map(|r| PanelRow { chars: vec![0.0; 7], ..r.clone() })
            .collect();
        let panel7 = Panel::new(rows, names).unwrap();
        let r = char_importance_from_matrix(dup_matrix, &panel7, &fixed_opts(0.0), 5, 3).unwrap();
        assert!((r.chars[0].w - r.chars[6].w).abs() < 1e-8);
    }

    #[test]
    fn all_degenerate_draws_error() {
        let (c, panel) = sparse_matrix(4, 30);
        let mut fit = fit_from_matrix(c, &panel, &fixed_opts(0.0)).unwrap();
        fit.threshold_ratio = 1.0;
        assert!(matches!(char_importance_from_fit(&fit, 5, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn weights_ignore_factor_sign_flips() {
        let (c, panel) = sparse_matrix(5, 30);
        let fit = fit_from_matrix(c, &panel, &fixed_opts(0.2)).unwrap();
        let mut flipped = fit.gamma_check.clone();
        flipped.column_mut(1).neg_mut();
        assert_eq!(importance_weights(&fit.gamma_check), importance_weights(&flipped));
    }

    proptest! {
        #[test]
        fn r2_decreases_when_a_prediction_moves_away(idx in 0usize..6, step in 1e-4f64..1.0, base in proptest::collection::vec(-0.05f64..0.05, 6)) {
            let panel = toy_panel(&RETS);
            let r = panel.rows()[idx].ret;
            let before = predictive_r2(&preds_for(&panel, &base), &panel).unwrap();
            let mut moved = base.clone();
            let dir = if base[idx] >= r { 1.0 } else { -1.0 };
            moved[idx] += dir * step;
            let after = predictive_r2(&preds_for(&panel, &moved), &panel).unwrap();
            prop_assert!(after < before);
        }
    }
}
