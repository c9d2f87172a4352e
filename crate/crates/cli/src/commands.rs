//! Subcommand pipelines and report emission.

use std::path::{Path, PathBuf};

use dslfm::aptests::{char_importance_from_fit, predictive_r2, rp_test, CharImportanceReport, RiskPremiumTest};
use dslfm::backtest::{
    load_predictions, market_returns, observable_factor_benchmark, pca_benchmark, perf_stats_for, sort_quintiles,
    Leg, ObservableBenchmarkOptions, PerfStats, PortfolioSeries, SelectedModel, Weighting,
};
use dslfm::factor::{fit_dslfm, predict_returns, FactorModelFit, PredictionSet};
use dslfm::risk_premium::{load_factor_series, risk_premium_from_fit, RiskPremiumEstimate};
use dslfm::simulate::run_monte_carlo;
use dslfm::{load_panel, Panel};
use serde::Serialize;

use crate::config::{Predictor, RunConfig};
use crate::render;
use crate::{Command, RunError};

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'static str,
    version: &'static str,
    config_sha256: String,
    seed: u64,
    config: &'a RunConfig,
    result: &'a T,
}

fn emit<T: Serialize>(cmd: Command, cfg: &RunConfig, out: &Path, result: &T, table: String) -> Result<Vec<PathBuf>, RunError> {
    std::fs::create_dir_all(out)?;
    let envelope = Envelope {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: cfg.digest(),
        seed: cfg.seed,
        config: cfg,
        result,
    };
    let json_path = out.join(format!("{}.json", cmd.name()));
    let mut json = serde_json::to_vec_pretty(&envelope).map_err(std::io::Error::other)?;
    json.push(b'\n');
    std::fs::write(&json_path, json)?;
    let txt_path = out.join(format!("{}.txt", cmd.name()));
    let header = format!("dslfm {}  config sha256 {}  seed {}\n\n", cmd.name(), envelope.config_sha256, cfg.seed);
    std::fs::write(&txt_path, header + &table)?;
    Ok(vec![json_path, txt_path])
}

pub fn dispatch(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    match cmd {
        Command::Simulate => cmd_simulate(cfg, out),
        Command::Fit => cmd_fit(cfg, out),
        Command::Premium => cmd_premium(cfg, out),
        Command::Backtest => cmd_backtest(cfg, out),
        Command::Importance => cmd_importance(cfg, out),
    }
}

fn read_panel(cfg: &RunConfig) -> Result<Panel, RunError> {
    let path = cfg.require_panel()?;
    let panel = load_panel(path, &cfg.schema).map_err(RunError::data("panel"))?;
    Ok(if cfg.normalize { panel.normalize_characteristics() } else { panel })
}

fn fit_panel(cfg: &RunConfig, panel: &Panel) -> Result<FactorModelFit, RunError> {
    let mut opts = cfg.fit.clone();
    opts.dsl.seed = cfg.seed;
    fit_dslfm(panel, &opts).map_err(RunError::data("fit"))
}

fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let mut sim = cfg.simulate.clone();
    sim.seed = cfg.seed;
    let report = run_monte_carlo(&sim).map_err(|e| match e {
        dslfm::Error::Input(msg) | dslfm::Error::Calibration(msg) => RunError::Config(format!("simulate: {msg}")),
        other => RunError::Data { stage: "simulate", source: other },
    })?;
    let table = report.table();
    emit(Command::Simulate, cfg, out, &report, table)
}

fn cmd_fit(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let panel = read_panel(cfg)?;
    let fit = fit_panel(cfg, &panel)?;
    let table = render::fit_table(&fit);
    emit(Command::Fit, cfg, out, &fit, table)
}

#[derive(Serialize)]
struct PremiumResult {
    estimate: RiskPremiumEstimate,
    /// Absent when the standard error is zero.
    test: Option<RiskPremiumTest>,
    k: usize,
    threshold_ratio: f64,
}

fn cmd_premium(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let factor_path = cfg.require_factor()?;
    let panel = read_panel(cfg)?;
    let factor = load_factor_series(factor_path).map_err(RunError::data("factor"))?;
    let fit = fit_panel(cfg, &panel)?;
    let estimate = risk_premium_from_fit(&fit, &panel, &factor, &cfg.premium).map_err(RunError::data("premium"))?;
    let test = match rp_test(&estimate) {
        Ok(t) => Some(t),
        Err(dslfm::Error::Degenerate(_)) => None,
        Err(e) => return Err(RunError::Data { stage: "premium", source: e }),
    };
    let result = PremiumResult { k: fit.k, threshold_ratio: fit.threshold_ratio, estimate, test };
    let table = render::premium_table(&result.estimate, result.test.as_ref());
    emit(Command::Premium, cfg, out, &result, table)
}

#[derive(Serialize)]
pub struct BacktestRun {
    pub label: String,
    pub predictive_r2: Option<f64>,
    pub quintile_means: [f64; 5],
    /// Quintiles 1 to 5, then the 5−1 spread.
    pub stats: Vec<PerfStats>,
    pub series: PortfolioSeries,
}

#[derive(Serialize)]
struct BacktestResult {
    runs: Vec<BacktestRun>,
    /// Winners of the observable-factor search, without their predictions.
    selected: Vec<SelectionSummary>,
    models_evaluated: Option<usize>,
}

#[derive(Serialize)]
struct SelectionSummary {
    size: usize,
    chars: Vec<usize>,
    names: Vec<String>,
    validation_r2: f64,
}

impl From<&SelectedModel> for SelectionSummary {
    fn from(m: &SelectedModel) -> Self {
        Self { size: m.size, chars: m.chars.clone(), names: m.names.clone(), validation_r2: m.validation_r2 }
    }
}

fn backtest_run(
    cfg: &RunConfig,
    panel: &Panel,
    label: String,
    preds: &PredictionSet,
    market: Option<&dslfm::risk_premium::ObservableFactorSeries>,
) -> Result<BacktestRun, RunError> {
    let bt = &cfg.backtest;
    let series = sort_quintiles(preds, panel, bt.weighting).map_err(RunError::data("backtest"))?;
    let market = match market {
        Some(m) => m.aligned(&series.weeks).map_err(RunError::data("market"))?.as_slice().to_vec(),
        None => {
            let weighting = if panel.has_market_caps() { Weighting::Value } else { Weighting::Equal };
            market_returns(panel, &series.weeks, weighting).map_err(RunError::data("market"))?
        }
    };
    let mut stats = Vec::with_capacity(6);
    for leg in (1..=5).map(Leg::Quintile).chain([Leg::Spread]) {
        stats.push(perf_stats_for(&series, leg, &market, bt.nw_lags).map_err(RunError::data("performance"))?);
    }
    let mut quintile_means = [0.0; 5];
    for (q, m) in quintile_means.iter_mut().enumerate() {
        *m = stats[q].mean;
    }
    let predictive_r2 = predictive_r2(preds, panel).ok();
    Ok(BacktestRun { label, predictive_r2, quintile_means, stats, series })
}

fn cmd_backtest(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let bt = &cfg.backtest;
    if let Predictor::File { path } = &bt.predictor {
        crate::config::require_file("backtest.predictor.path", path)?;
    }
    if let Some(path) = &bt.market {
        crate::config::require_file("backtest.market", path)?;
    }
    let panel = read_panel(cfg)?;
    let market = bt.market.as_ref().map(load_factor_series).transpose().map_err(RunError::data("market"))?;
    let mut runs = Vec::new();
    let mut selected = Vec::new();
    let mut models_evaluated = None;
    match &bt.predictor {
        Predictor::Dslfm { train_end, window } => {
            let train = match train_end {
                Some(end) => panel.slice_weeks(panel.weeks()[0], *end).map_err(RunError::data("backtest"))?,
                None => panel.clone(),
            };
            let fit = fit_panel(cfg, &train)?;
            let window = window.unwrap_or(fit.window);
            let mut preds = predict_returns(&fit, &panel, window).map_err(RunError::data("predict"))?;
            if let Some(end) = train_end {
                preds.predictions.retain(|p| p.week > *end);
            }
            runs.push(backtest_run(cfg, &panel, "dslfm".into(), &preds, market.as_ref())?);
        }
        Predictor::Pca { k, refit_every } => {
            let preds = pca_benchmark(&panel, *k, *refit_every).map_err(RunError::data("pca benchmark"))?;
            runs.push(backtest_run(cfg, &panel, format!("pca k={k}"), &preds, market.as_ref())?);
        }
        Predictor::Observable { window, candidates, max_size, min_obs } => {
            let opts = ObservableBenchmarkOptions {
                candidates: candidates.clone(),
                max_size: *max_size,
                window: window.clone(),
                weighting: bt.weighting,
                min_obs: *min_obs,
            };
            let bench = observable_factor_benchmark(&panel, &opts).map_err(RunError::data("observable benchmark"))?;
            for m in &bench.best {
                let label = format!("observable {}", m.names.join("+"));
                runs.push(backtest_run(cfg, &panel, label, &m.predictions, market.as_ref())?);
                selected.push(SelectionSummary::from(m));
            }
            models_evaluated = Some(bench.models_evaluated);
        }
        Predictor::File { path } => {
            let preds = load_predictions(path).map_err(RunError::data("predictions"))?;
            runs.push(backtest_run(cfg, &panel, "file".into(), &preds, market.as_ref())?);
        }
    }
    let table = render::backtest_table(&runs);
    let result = BacktestResult { runs, selected, models_evaluated };
    emit(Command::Backtest, cfg, out, &result, table)
}

fn cmd_importance(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    if cfg.importance.draws < 2 {
        return Err(RunError::Config("importance.draws must be >= 2".into()));
    }
    let panel = read_panel(cfg)?;
    let fit = fit_panel(cfg, &panel)?;
    let report: CharImportanceReport =
        char_importance_from_fit(&fit, cfg.importance.draws, cfg.seed).map_err(RunError::data("importance"))?;
    let table = render::importance_table(&report);
    emit(Command::Importance, cfg, out, &report, table)
}
