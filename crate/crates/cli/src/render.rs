//! Aligned-text tables rendered from the report structs.

use std::fmt::Write;

use dslfm::aptests::{stars, CharImportanceReport, RiskPremiumTest};
use dslfm::factor::FactorModelFit;
use dslfm::risk_premium::RiskPremiumEstimate;

use crate::commands::BacktestRun;

fn star_str(n: u8) -> &'static str {
    ["", "*", "**", "***"][n.min(3) as usize]
}

pub fn fit_table(fit: &FactorModelFit) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "characteristic");
    for l in 0..fit.k {
        let _ = write!(out, " {:>12}", format!("factor {}", l + 1));
    }
    out.push('\n');
    for (j, name) in fit.char_names.iter().enumerate() {
        let _ = write!(out, "{name:<16}");
        for l in 0..fit.k {
            let _ = write!(out, " {:>12.6}", fit.gamma_check[(j, l)]);
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "\nk = {}, weeks = {}, threshold = {:.6e} (ratio {:.3}, {:?}), window = {}",
        fit.k,
        fit.weeks.len(),
        fit.threshold_lambda,
        fit.threshold_ratio,
        fit.mode,
        fit.window
    );
    for w in &fit.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

pub fn premium_table(est: &RiskPremiumEstimate, test: Option<&RiskPremiumTest>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>12} {:>12} {:>26} {:>10}", "factor", "gamma_g", "sigma_g", "CI", "p-value");
    let t = test.map(|t| t.tstat);
    let _ = writeln!(
        out,
        "{:<16} {:>12.6e} {:>12.6e} {:>26} {:>10}{}",
        est.factor,
        est.gamma_g,
        est.sigma_g,
        format!("[{:.4e}, {:.4e}]", est.ci.0, est.ci.1),
        est.pvalue.map_or("n/a".to_string(), |p| format!("{p:.4}")),
        star_str(t.map_or(0, stars)),
    );
    let _ = writeln!(out, "\nT = {}, assets = {}, alpha = {}, hac lags = {}", est.t, est.n_assets, est.alpha, est.hac_lags);
    for w in &est.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

pub fn backtest_table(runs: &[BacktestRun]) -> String {
    let mut out = String::new();
    for run in runs {
        let _ = writeln!(out, "{}", run.label);
        let _ = writeln!(
            out,
            "{:<8} {:>11} {:>8} {:>8} {:>8} {:>9} {:>8} {:>10} {:>8} {:>7}",
            "", "mean", "t", "Sharpe", "Sortino", "turnover", "maxDD", "alpha", "t(a)", "beta"
        );
        for s in &run.stats {
            let name = match s.leg {
                dslfm::backtest::Leg::Quintile(q) => format!("Q{q}"),
                dslfm::backtest::Leg::Spread => "5-1".to_string(),
            };
            let _ = writeln!(
                out,
                "{:<8} {:>11.6}{:<3} {:>5.2} {:>8.3} {:>8} {:>9.3} {:>8.3} {:>10.6} {:>8} {:>7.3}",
                name,
                s.mean,
                star_str(stars(s.mean_tstat)),
                s.mean_tstat,
                s.sharpe,
                s.sortino.map_or("n/a".to_string(), |v| format!("{v:.3}")),
                s.turnover,
                s.max_drawdown,
                s.alpha,
                s.alpha_tstat.map_or("n/a".to_string(), |v| format!("{v:.2}")),
                s.beta,
            );
        }
        let _ = writeln!(
            out,
            "weeks = {}, skipped = {}, predictive R2 = {}\n",
            run.series.weeks.len(),
            run.series.skipped.len(),
            run.predictive_r2.map_or("n/a".to_string(), |r| format!("{r:.4}"))
        );
    }
    out
}

pub fn importance_table(report: &CharImportanceReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>12} {:>12} {:>8}", "characteristic", "W", "se", "z");
    for c in &report.chars {
        let _ = writeln!(
            out,
            "{:<16} {:>12.6e} {:>12.6e} {:>8}{}",
            c.name,
            c.w,
            c.se,
            c.z.map_or("n/a".to_string(), |z| format!("{z:.2}")),
            star_str(c.stars)
        );
    }
    let _ = writeln!(
        out,
        "\nk = {}, threshold ratio = {:.3}, draws = {} (failed {}, degenerate {})",
        report.k, report.threshold_ratio, report.draws, report.failed_draws, report.degenerate_draws
    );
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}
