//! Quintile-sort backtests, performance statistics and the PCA and
//! observable-factor benchmark predictors.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aptests::predictive_r2;
use crate::error::{Error, Result};
use crate::factor::{pca_decompose_matrix, Prediction, PredictionSet};
use crate::panel::{Panel, PanelRow};
use crate::regress::{long_run_variance, newey_west, ols_fit, Lags};

pub const QUINTILES: usize = 5;
pub const WEEKS_PER_YEAR: f64 = 52.0;
/// Minimum number of weeks for [`perf_stats`].
pub const MIN_PERF_WEEKS: usize = 8;
/// Largest characteristic pool of [`observable_factor_benchmark`].
pub const MAX_CANDIDATE_CHARS: usize = 70;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Value,
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Holding {
    pub asset_id: String,
    /// 1 (lowest prediction) to 5.
    pub quintile: u8,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedWeek {
    pub week: u32,
    pub reason: String,
}

/// Weekly quintile and 5−1 returns of a prediction sort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioSeries {
    pub weighting: Weighting,
    pub weeks: Vec<u32>,
    /// `quintiles[t][q]` is the return of quintile `q + 1` in week `weeks[t]`.
    pub quintiles: Vec<[f64; QUINTILES]>,
    pub spread: Vec<f64>,
    /// Weights inside each quintile, per week, sorted by asset id.
    pub holdings: Vec<Vec<Holding>>,
    pub skipped: Vec<SkippedWeek>,
}

/// Which return stream of a [`PortfolioSeries`] to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leg {
    Quintile(u8),
    Spread,
}

impl PortfolioSeries {
    pub fn returns(&self, leg: Leg) -> Result<Vec<f64>> {
        match leg {
            Leg::Spread => Ok(self.spread.clone()),
            Leg::Quintile(q) if (1..=QUINTILES as u8).contains(&q) => {
                Ok(self.quintiles.iter().map(|r| r[q as usize - 1]).collect())
            }
            Leg::Quintile(q) => Err(Error::Input(format!("quintile must lie in 1..=5, got {q}"))),
        }
    }

    /// Signed portfolio weights of `leg` in week position `t`.
    pub fn weights(&self, leg: Leg, t: usize) -> BTreeMap<&str, f64> {
        let mut out = BTreeMap::new();
        for h in &self.holdings[t] {
            let w = match leg {
                Leg::Quintile(q) if h.quintile == q => h.weight,
                Leg::Spread if h.quintile == QUINTILES as u8 => h.weight,
                Leg::Spread if h.quintile == 1 => -h.weight,
                _ => continue,
            };
            *out.entry(h.asset_id.as_str()).or_insert(0.0) += w;
        }
        out
    }
}

/// 1-based quintile of rank `rank` (1-based) among `n`: the smallest `q` with
/// `rank ≤ ⌈qn/5⌉`.
pub fn quintile_of(rank: usize, n: usize) -> u8 {
    (1..=QUINTILES).find(|&q| rank <= (q * n).div_ceil(QUINTILES)).unwrap_or(QUINTILES) as u8
}

/// Sorts each week's predicted assets into quintiles and aggregates their
/// realized returns.
pub fn sort_quintiles(predictions: &PredictionSet, panel: &Panel, weighting: Weighting) -> Result<PortfolioSeries> {
    let mut series = PortfolioSeries {
        weighting,
        weeks: Vec::new(),
        quintiles: Vec::new(),
        spread: Vec::new(),
        holdings: Vec::new(),
        skipped: Vec::new(),
    };
    let mut overlap = 0usize;
    for (pos, &week) in panel.weeks().iter().enumerate() {
        let mut cells: Vec<(f64, &PanelRow)> = panel
            .week_rows(pos)
            .iter()
            .filter_map(|row| predictions.get(&row.asset_id, week).map(|v| (v, row)))
            .collect();
        overlap += cells.len();
        if cells.is_empty() {
            continue;
        }
        if cells.len() < QUINTILES {
            series.skipped.push(SkippedWeek {
                week,
                reason: format!("{} predicted assets, need at least {QUINTILES}", cells.len()),
            });
            continue;
        }
        if let Some((_, row)) = cells.iter().find(|(v, _)| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite prediction for asset {} in week {week}", row.asset_id)));
        }
        cells.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.asset_id.cmp(&b.1.asset_id)));
        let n = cells.len();
        let mut raw = Vec::with_capacity(n);
        for (rank, (_, row)) in cells.iter().enumerate() {
            let size = match weighting {
                Weighting::Equal => 1.0,
                Weighting::Value => row.market_cap.ok_or_else(|| {
                    Error::Input(format!("value weighting needs market_cap: missing for {} in week {week}", row.asset_id))
                })?,
            };
            raw.push((quintile_of(rank + 1, n), size, *row));
        }
        let mut totals = [0.0; QUINTILES];
        let mut counts = [0usize; QUINTILES];
        for (q, size, _) in &raw {
            totals[*q as usize - 1] += size;
            counts[*q as usize - 1] += 1;
        }
        if let Some(q) = (0..QUINTILES).find(|&q| totals[q] <= 0.0) {
            series.skipped.push(SkippedWeek { week, reason: format!("quintile {} has zero total market cap", q + 1) });
            continue;
        }
        debug_assert!(counts.iter().all(|&c| c > 0));
        let mut rets = [0.0; QUINTILES];
        let mut holdings = Vec::with_capacity(n);
        for (q, size, row) in raw {
            let weight = size / totals[q as usize - 1];
            rets[q as usize - 1] += weight * row.ret;
            holdings.push(Holding { asset_id: row.asset_id.clone(), quintile: q, weight });
        }
        holdings.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
        series.weeks.push(week);
        series.spread.push(rets[QUINTILES - 1] - rets[0]);
        series.quintiles.push(rets);
        series.holdings.push(holdings);
    }
    if overlap == 0 {
        return Err(Error::Input("empty overlap: no panel cell has a prediction".into()));
    }
    if series.weeks.is_empty() {
        return Err(Error::Input(format!("no week has at least {QUINTILES} predicted assets")));
    }
    Ok(series)
}

/// Predictions from a CSV with header `asset_id,week,value`.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let expected = ["asset_id", "week", "value"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Schema(format!("predictions need the header asset_id,week,value, found {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut preds = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let week: u32 = record[1]
            .parse()
            .map_err(|_| Error::Input(format!("line {}: bad week '{}'", line + 2, &record[1])))?;
        let value: f64 = record[2]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Input(format!("line {}: bad value '{}'", line + 2, &record[2])))?;
        preds.push(Prediction { asset_id: record[0].to_string(), week, value });
    }
    let set = PredictionSet::new(1, preds, Vec::new());
    if let Some(w) = set.predictions.windows(2).find(|w| w[0].week == w[1].week && w[0].asset_id == w[1].asset_id) {
        return Err(Error::DuplicateKey { asset: w[0].asset_id.clone(), week: w[0].week });
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfStats {
    pub leg: Leg,
    pub weeks: usize,
    pub mean: f64,
    pub sd: f64,
    pub sharpe: f64,
    /// `None` when no week has a negative return.
    pub sortino: Option<f64>,
    pub turnover: f64,
    pub max_drawdown: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mean_tstat: f64,
    /// `None` when the market explains the strategy exactly.
    pub alpha_tstat: Option<f64>,
    pub nw_lags: usize,
}

/// Sample mean and standard deviation (`T − 1` denominator).
fn mean_sd(x: &[f64]) -> (f64, f64) {
    let t = x.len() as f64;
    let mean = x.iter().sum::<f64>() / t;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1.0);
    (mean, var.sqrt())
}

/// Largest peak-to-trough loss of the wealth path `Π(1 + r)` starting at 1.
/// Wealth is floored at zero, so the result lies in `[0, 1]`.
pub fn max_drawdown(returns: &[f64]) -> f64 {
    let (mut wealth, mut peak, mut worst) = (1.0_f64, 1.0_f64, 0.0_f64);
    for r in returns {
        wealth = (wealth * (1.0 + r)).max(0.0);
        peak = peak.max(wealth);
        worst = worst.max(1.0 - wealth / peak);
    }
    worst
}

/// Mean of `Σ_i |w_t,i − w_{t−1},i| / 2` over consecutive weeks of the series.
pub fn turnover(series: &PortfolioSeries, leg: Leg) -> f64 {
    if series.weeks.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for t in 1..series.weeks.len() {
        let (prev, cur) = (series.weights(leg, t - 1), series.weights(leg, t));
        let mut change = 0.0;
        for (asset, w) in &cur {
            change += (w - prev.get(asset).copied().unwrap_or(0.0)).abs();
        }
        for (asset, w) in &prev {
            if !cur.contains_key(asset) {
                change += w.abs();
            }
        }
        total += change / 2.0;
    }
    total / (series.weeks.len() - 1) as f64
}

/// Statistics of the 5−1 spread.
pub fn perf_stats(series: &PortfolioSeries, market: &[f64], nw_lags: Lags) -> Result<PerfStats> {
    perf_stats_for(series, Leg::Spread, market, nw_lags)
}

/// Statistics of one leg against a market return aligned with `series.weeks`.
pub fn perf_stats_for(series: &PortfolioSeries, leg: Leg, market: &[f64], nw_lags: Lags) -> Result<PerfStats> {
    let r = series.returns(leg)?;
    let t = r.len();
    if t < MIN_PERF_WEEKS {
        return Err(Error::Input(format!("performance statistics need at least {MIN_PERF_WEEKS} weeks, got {t}")));
    }
    if market.len() != t {
        return Err(Error::Input(format!("market series has {} weeks, strategy has {t}", market.len())));
    }
    if market.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite market return".into()));
    }
    let (mean, sd) = mean_sd(&r);
    let scale = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(sd > 1e-14 * scale) {
        return Err(Error::Degenerate("strategy return has zero variance: Sharpe ratio undefined".into()));
    }
    let (_, market_sd) = mean_sd(market);
    let market_scale = market.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(market_sd > 1e-14 * market_scale) {
        return Err(Error::Degenerate("market return has zero variance: beta undefined".into()));
    }
    let downside = (r.iter().map(|v| v.min(0.0).powi(2)).sum::<f64>() / t as f64).sqrt();
    let sortino = (downside > 0.0).then(|| mean / downside * WEEKS_PER_YEAR.sqrt());

    let x = DMatrix::from_fn(t, 2, |i, j| if j == 0 { 1.0 } else { market[i] });
    let fit = ols_fit(&x, &DVector::from_column_slice(&r))?;
    let (alpha, beta) = (fit.coef[0], fit.coef[1]);
    let nw = newey_west(&r, nw_lags)?;
    let excess: Vec<f64> = r.iter().zip(market).map(|(ri, mi)| ri - beta * mi).collect();
    let alpha_se = (long_run_variance(&excess, nw.lags).max(0.0) / t as f64).sqrt();
    let alpha_tstat = (alpha_se > 1e-14 * scale).then(|| alpha / alpha_se);
    Ok(PerfStats {
        leg,
        weeks: t,
        mean,
        sd,
        sharpe: mean / sd * WEEKS_PER_YEAR.sqrt(),
        sortino,
        turnover: turnover(series, leg),
        max_drawdown: max_drawdown(&r),
        alpha,
        beta,
        mean_tstat: nw.tstat,
        alpha_tstat,
        nw_lags: nw.lags,
    })
}

/// Value-weighted (or equal-weighted) mean panel return per week, aligned
/// with `weeks`.
pub fn market_returns(panel: &Panel, weeks: &[u32], weighting: Weighting) -> Result<Vec<f64>> {
    weeks
        .iter()
        .map(|&week| {
            let pos = panel
                .week_position(week)
                .ok_or_else(|| Error::Input(format!("week {week} is not in the panel")))?;
            let (mut num, mut den) = (0.0, 0.0);
            for row in panel.week_rows(pos) {
                let w = match weighting {
                    Weighting::Equal => 1.0,
                    Weighting::Value => row.market_cap.ok_or_else(|| {
                        Error::Input(format!("value weighting needs market_cap: missing for {} in week {week}", row.asset_id))
                    })?,
                };
                num += w * row.ret;
                den += w;
            }
            if den <= 0.0 {
                return Err(Error::Degenerate(format!("week {week} has zero total weight")));
            }
            Ok(num / den)
        })
        .collect()
}

/// Assets observed in every week of `positions`, and their `T × N` returns.
fn complete_returns(panel: &Panel, positions: &[usize]) -> (Vec<String>, DMatrix<f64>) {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &pos in positions {
        for row in panel.week_rows(pos) {
            *counts.entry(row.asset_id.as_str()).or_insert(0) += 1;
        }
    }
    let assets: Vec<String> =
        counts.into_iter().filter(|&(_, c)| c == positions.len()).map(|(a, _)| a.to_string()).collect();
    let index: BTreeMap<&str, usize> = assets.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    let mut r = DMatrix::zeros(positions.len(), assets.len());
    for (t, &pos) in positions.iter().enumerate() {
        for row in panel.week_rows(pos) {
            if let Some(&i) = index.get(row.asset_id.as_str()) {
                r[(t, i)] = row.ret;
            }
        }
    }
    (assets, r)
}

/// Expanding-window statistical-factor benchmark. Weeks are cut into blocks of
/// `refit_every`; each block is predicted from PCA factors of all earlier
/// weeks, using assets observed in every one of them. Blocks with at most `k`
/// such weeks or assets are skipped; if that leaves no prediction because of
/// too few assets, the result is a rank error.
pub fn pca_benchmark(panel: &Panel, k: usize, refit_every: usize) -> Result<PredictionSet> {
    if k == 0 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    if refit_every == 0 {
        return Err(Error::Input("refit_every must be >= 1".into()));
    }
    let n_weeks = panel.n_weeks();
    let mut predictions = Vec::new();
    let mut skipped = Vec::new();
    let mut thin_blocks = Vec::new();
    let mut start = 0;
    while start < n_weeks {
        let end = (start + refit_every).min(n_weeks);
        let block: Vec<u32> = panel.weeks()[start..end].to_vec();
        let history: Vec<usize> = (0..start).collect();
        let (assets, r) = complete_returns(panel, &history);
        if history.len() <= k || k >= assets.len() {
            if history.len() > k {
                thin_blocks.push((panel.weeks()[start], assets.len()));
            }
            skipped.extend(block);
            start = end;
            continue;
        }
        let dec = pca_decompose_matrix(&r, k)?;
        let t_in = history.len() as f64;
        let factor_mean = dec.factors.row_sum().transpose() / t_in;
        let index: BTreeMap<&str, usize> = assets.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
        let mut values = Vec::with_capacity(assets.len());
        for i in 0..assets.len() {
            let fit = ols_fit(&dec.factors, &r.column(i).into_owned())?;
            values.push(fit.coef.dot(&factor_mean));
        }
        for pos in start..end {
            let week = panel.weeks()[pos];
            for row in panel.week_rows(pos) {
                if let Some(&i) = index.get(row.asset_id.as_str()) {
                    predictions.push(Prediction { asset_id: row.asset_id.clone(), week, value: values[i] });
                }
            }
        }
        start = end;
    }
    if predictions.is_empty() {
        if let Some(&(week, n)) = thin_blocks.iter().max_by_key(|b| b.1) {
            return Err(Error::Rank(format!(
                "k = {k} needs more than k assets with full history; at most {n} available (block starting week {week})"
            )));
        }
    }
    Ok(PredictionSet::new(refit_every, predictions, skipped))
}

/// Week ranges (inclusive) of the observable-factor benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionWindow {
    pub estimation: (u32, u32),
    pub validation: (u32, u32),
    pub test: (u32, u32),
}

impl SelectionWindow {
    fn validate(&self) -> Result<()> {
        let ranges = [self.estimation, self.validation, self.test];
        if ranges.iter().any(|(a, b)| a > b) {
            return Err(Error::Input("window bounds reversed".into()));
        }
        if self.estimation.1 >= self.validation.0 || self.validation.1 >= self.test.0 {
            return Err(Error::Input(
                "estimation, validation and test windows must be disjoint and in that order".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableBenchmarkOptions {
    /// Candidate characteristic indices; `None` takes all of them.
    pub candidates: Option<Vec<usize>>,
    pub max_size: usize,
    pub window: SelectionWindow,
    pub weighting: Weighting,
    /// Fewest estimation weeks an asset needs to receive loadings.
    pub min_obs: usize,
}

impl ObservableBenchmarkOptions {
    pub fn new(window: SelectionWindow) -> Self {
        Self { candidates: None, max_size: 3, window, weighting: Weighting::Value, min_obs: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedModel {
    pub size: usize,
    pub chars: Vec<usize>,
    pub names: Vec<String>,
    pub validation_r2: f64,
    /// Predictions over the test window, estimated on all weeks before it.
    pub predictions: PredictionSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableBenchmark {
    pub best: Vec<SelectedModel>,
    pub models_evaluated: usize,
    pub skipped_weeks: Vec<SkippedWeek>,
}

/// Top-minus-bottom quintile return of every characteristic, for the weeks
/// where a sort exists.
pub fn characteristic_factors(panel: &Panel, chars: &[usize], weighting: Weighting) -> Result<CharFactors> {
    let mut weeks: Option<Vec<u32>> = None;
    let mut skipped = Vec::new();
    let mut columns = Vec::with_capacity(chars.len());
    for &j in chars {
        let preds: Vec<Prediction> = panel
            .rows()
            .iter()
            .map(|row| Prediction { asset_id: row.asset_id.clone(), week: row.week, value: row.chars[j] })
            .collect();
        let series = sort_quintiles(&PredictionSet::new(1, preds, Vec::new()), panel, weighting)?;
        if weeks.as_ref().is_some_and(|w| *w != series.weeks) {
            return Err(Error::Estimation("characteristic sorts cover different weeks".into()));
        }
        if weeks.is_none() {
            skipped = series.skipped.clone();
            weeks = Some(series.weeks.clone());
        }
        columns.push(series.spread);
    }
    let weeks = weeks.unwrap_or_default();
    let values = DMatrix::from_fn(weeks.len(), chars.len(), |t, j| columns[j][t]);
    Ok(CharFactors { weeks, values, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharFactors {
    pub weeks: Vec<u32>,
    /// `T × m`, one column per requested characteristic.
    pub values: DMatrix<f64>,
    pub skipped: Vec<SkippedWeek>,
}

/// Per-asset factor cross products over a set of weeks.
struct AssetMoments {
    asset_id: String,
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    n_obs: usize,
}

fn asset_moments(panel: &Panel, factors: &CharFactors, range: (u32, u32)) -> (Vec<AssetMoments>, DVector<f64>) {
    let m = factors.values.ncols();
    let mut by_asset: BTreeMap<&str, AssetMoments> = BTreeMap::new();
    let mut sum = DVector::zeros(m);
    let mut used = 0usize;
    for (t, &week) in factors.weeks.iter().enumerate() {
        if week < range.0 || week > range.1 {
            continue;
        }
        let g = factors.values.row(t).transpose();
        sum += &g;
        used += 1;
        let pos = panel.week_position(week).expect("factor week comes from the panel");
        for row in panel.week_rows(pos) {
            let entry = by_asset.entry(row.asset_id.as_str()).or_insert_with(|| AssetMoments {
                asset_id: row.asset_id.clone(),
                gram: DMatrix::zeros(m, m),
                cross: DVector::zeros(m),
                n_obs: 0,
            });
            entry.gram += &g * g.transpose();
            entry.cross.axpy(row.ret, &g, 1.0);
            entry.n_obs += 1;
        }
    }
    let mean = if used > 0 { sum / used as f64 } else { DVector::zeros(m) };
    (by_asset.into_values().collect(), mean)
}

/// Static per-asset loadings on the selected factor columns (min-norm
/// normal equations) dotted with the factor means.
fn model_values(moments: &[AssetMoments], mean: &DVector<f64>, cols: &[usize], min_obs: usize) -> Result<Vec<(String, f64)>> {
    let d = cols.len();
    let mut out = Vec::new();
    for a in moments.iter().filter(|a| a.n_obs >= min_obs.max(d + 1)) {
        let gram = DMatrix::from_fn(d, d, |i, j| a.gram[(cols[i], cols[j])]);
        let cross = DVector::from_fn(d, |i, _| a.cross[cols[i]]);
        let coef = if let Some(chol) = gram.clone().cholesky() {
            chol.solve(&cross)
        } else {
            ols_fit(&gram, &cross)?.coef
        };
        let value: f64 = coef.iter().zip(cols).map(|(b, &c)| b * mean[c]).sum();
        out.push((a.asset_id.clone(), value));
    }
    Ok(out)
}

fn predictions_over(panel: &Panel, values: &[(String, f64)], range: (u32, u32)) -> PredictionSet {
    let lookup: BTreeMap<&str, f64> = values.iter().map(|(a, v)| (a.as_str(), *v)).collect();
    let preds = panel
        .rows()
        .iter()
        .filter(|r| r.week >= range.0 && r.week <= range.1)
        .filter_map(|r| {
            lookup.get(r.asset_id.as_str()).map(|&v| Prediction { asset_id: r.asset_id.clone(), week: r.week, value: v })
        })
        .collect();
    PredictionSet::new(1, preds, Vec::new())
}

/// All `size`-subsets of `0..m` in lexicographic order.
pub fn combinations(m: usize, size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if size == 0 || size > m {
        return out;
    }
    let mut idx: Vec<usize> = (0..size).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..size).rev().find(|&i| idx[i] < m - size + i) else { break };
        idx[i] += 1;
        for j in i + 1..size {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

/// Best one- to `max_size`-factor models of characteristic long-short
/// factors by validation predictive R², with test-window predictions.
pub fn observable_factor_benchmark(panel: &Panel, opts: &ObservableBenchmarkOptions) -> Result<ObservableBenchmark> {
    opts.window.validate()?;
    let pool: Vec<usize> = opts.candidates.clone().unwrap_or_else(|| (0..panel.n_chars()).collect());
    if pool.is_empty() {
        return Err(Error::Input("empty candidate set".into()));
    }
    if pool.len() > MAX_CANDIDATE_CHARS {
        return Err(Error::Input(format!(
            "{} candidate characteristics exceed the cap of {MAX_CANDIDATE_CHARS}",
            pool.len()
        )));
    }
    if let Some(&j) = pool.iter().find(|&&j| j >= panel.n_chars()) {
        return Err(Error::Input(format!("characteristic index {j} out of range (p = {})", panel.n_chars())));
    }
    let mut seen = pool.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != pool.len() {
        return Err(Error::Input("duplicate candidate characteristic".into()));
    }
    if opts.max_size == 0 {
        return Err(Error::Input("max_size must be >= 1".into()));
    }
    let factors = characteristic_factors(panel, &pool, opts.weighting)?;
    let w = &opts.window;
    let (est, est_mean) = asset_moments(panel, &factors, w.estimation);
    let (full, full_mean) = asset_moments(panel, &factors, (w.estimation.0, w.validation.1));
    let validation = panel.slice_weeks(w.validation.0, w.validation.1)?;

    let mut best = Vec::new();
    let mut evaluated = 0;
    for size in 1..=opts.max_size.min(pool.len()) {
        let models = combinations(pool.len(), size);
        evaluated += models.len();
        let scores: Vec<Option<f64>> = models
            .par_iter()
            .map(|cols| {
                let values = model_values(&est, &est_mean, cols, opts.min_obs).ok()?;
                predictive_r2(&predictions_over(&validation, &values, w.validation), &validation).ok()
            })
            .collect();
        let winner = scores
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|s| (i, s)))
            .fold(None::<(usize, f64)>, |acc, (i, s)| match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((i, s)),
            });
        let Some((i, r2)) = winner else {
            return Err(Error::Estimation(format!("no {size}-factor model could be evaluated on the validation window")));
        };
        let cols = &models[i];
        let values = model_values(&full, &full_mean, cols, opts.min_obs)?;
        let chars: Vec<usize> = cols.iter().map(|&c| pool[c]).collect();
        best.push(SelectedModel {
            size,
            names: chars.iter().map(|&j| panel.char_names()[j].clone()).collect(),
            chars,
            validation_r2: r2,
            predictions: predictions_over(panel, &values, w.test),
        });
    }
    Ok(ObservableBenchmark { best, models_evaluated: evaluated, skipped_weeks: factors.skipped })
}
