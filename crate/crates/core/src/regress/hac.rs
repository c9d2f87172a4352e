//! Newey–West (Bartlett kernel) standard error of a sample mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lags {
    /// `floor(4 (T/100)^(2/9))`.
    Auto,
    Fixed(usize),
}

impl Lags {
    pub fn resolve(self, t: usize) -> usize {
        match self {
            Lags::Auto => (4.0 * (t as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize,
            Lags::Fixed(l) => l,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeweyWest {
    pub mean: f64,
    pub se: f64,
    pub tstat: f64,
    pub lags: usize,
}

/// Sample autocovariance at lag `l`, normalized by `T − 1` so that lag 0 is
/// the unbiased sample variance.
pub fn autocovariance(series: &[f64], mean: f64, lag: usize) -> f64 {
    let t = series.len();
    let s: f64 = (lag..t).map(|i| (series[i] - mean) * (series[i - lag] - mean)).sum();
    s / (t - 1) as f64
}

/// Bartlett-weighted long-run variance `γ₀ + 2 Σ_l (1 − l/(L+1)) γ_l`.
pub fn long_run_variance(series: &[f64], lags: usize) -> f64 {
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let mut var = autocovariance(series, mean, 0);
    for l in 1..=lags {
        let w = 1.0 - l as f64 / (lags + 1) as f64;
        var += 2.0 * w * autocovariance(series, mean, l);
    }
    var
}

pub fn newey_west(series: &[f64], lags: Lags) -> Result<NeweyWest> {
    let t = series.len();
    if t < 2 {
        return Err(Error::Input(format!("newey-west needs T >= 2, got {t}")));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in series".into()));
    }
    let lags = lags.resolve(t);
    if lags >= t {
        return Err(Error::Input(format!("lags ({lags}) must be < T ({t})")));
    }
    let mean = series.iter().sum::<f64>() / t as f64;
    let var = long_run_variance(series, lags).max(0.0);
    let se = (var / t as f64).sqrt();
    let scale = series.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if se <= 1e-14 * scale || se == 0.0 {
        return Err(Error::Degenerate("zero-variance series: t-statistic undefined".into()));
    }
    Ok(NeweyWest { mean, se, tstat: mean / se, lags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn zero_lags_is_classical() {
        let x = [0.3, -0.1, 0.8, 0.05, -0.4, 0.2];
        let nw = newey_west(&x, Lags::Fixed(0)).unwrap();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let s2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((nw.se - (s2 / n).sqrt()).abs() < 1e-12);
        assert!((nw.tstat - mean / (s2 / n).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_series_is_degenerate() {
        assert!(matches!(newey_west(&[0.01; 10], Lags::Fixed(2)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ar1_matches_direct_summation() {
        let mut rng = rng_from(17);
        let mut x = vec![0.0; 10];
        let mut prev = 0.0;
        for v in x.iter_mut() {
            prev = 0.5 * prev + rng.sample::<f64, _>(StandardNormal);
            *v = prev;
        }
        // oracle: full double sum with Bartlett weights w(|s - t|)
        let t = x.len();
        let mean = x.iter().sum::<f64>() / t as f64;
        let lags = 2usize;
        let mut acc = 0.0;
        for s in 0..t {
            for u in 0..t {
                let d = s.abs_diff(u);
                if d <= lags {
                    let w = 1.0 - d as f64 / (lags + 1) as f64;
                    acc += w * (x[s] - mean) * (x[u] - mean);
                }
            }
        }
        let se_oracle = (acc / (t - 1) as f64 / t as f64).sqrt();
        let nw = newey_west(&x, Lags::Fixed(lags)).unwrap();
        assert!((nw.se - se_oracle).abs() < 1e-12);
    }

    #[test]
    fn auto_lag_rule() {
        assert_eq!(Lags::Auto.resolve(100), 4);
        assert_eq!(Lags::Auto.resolve(26), 2);
        assert_eq!(Lags::Auto.resolve(500), 5);
    }

    #[test]
    fn lags_must_be_below_length() {
        assert!(newey_west(&[1.0, 2.0, 3.0], Lags::Fixed(3)).is_err());
    }
}
