//! Run configuration: one file (TOML or JSON) with a section per subcommand.

use std::path::{Path, PathBuf};

use dslfm::backtest::{SelectionWindow, Weighting};
use dslfm::factor::FitOptions;
use dslfm::regress::Lags;
use dslfm::risk_premium::PremiumOptions;
use dslfm::simulate::SimConfig;
use dslfm::PanelSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::RunError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; not part of the echoed config since results do not
    /// depend on it.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    /// Panel CSV.
    pub panel: Option<PathBuf>,
    pub schema: PanelSchema,
    /// Replace characteristics by within-week rank scores before fitting.
    pub normalize: bool,
    /// Observable factor CSV (`week,value`) for `premium`.
    pub factor: Option<PathBuf>,
    pub fit: FitOptions,
    pub premium: PremiumOptions,
    pub simulate: SimConfig,
    pub backtest: BacktestConfig,
    pub importance: ImportanceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub predictor: Predictor,
    pub weighting: Weighting,
    pub nw_lags: Lags,
    /// Market return CSV (`week,value`); the panel's value-weighted mean
    /// return when unset.
    pub market: Option<PathBuf>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self { predictor: Predictor::default(), weighting: Weighting::Value, nw_lags: Lags::Auto, market: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Predictor {
    /// Fit on weeks up to `train_end` (all weeks when unset) and predict every
    /// later week from trailing factor means.
    Dslfm { train_end: Option<u32>, window: Option<usize> },
    Pca { k: usize, refit_every: usize },
    Observable {
        window: SelectionWindow,
        candidates: Option<Vec<usize>>,
        #[serde(default = "default_max_size")]
        max_size: usize,
        #[serde(default = "default_min_obs")]
        min_obs: usize,
    },
    /// Predictions CSV with header `asset_id,week,value`.
    File { path: PathBuf },
}

fn default_max_size() -> usize {
    3
}

fn default_min_obs() -> usize {
    10
}

impl Default for Predictor {
    fn default() -> Self {
        Predictor::Dslfm { train_end: None, window: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    pub draws: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self { draws: 100 }
    }
}

/// Parses `text` as JSON when `path` ends in `.json`, TOML otherwise. Errors
/// carry the dotted path of the offending field.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig, RunError> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let fail = |field: String, msg: String| {
        let at = if field.is_empty() || field == "." { String::new() } else { format!(" at `{field}`") };
        RunError::Config(format!("{}{at}: {msg}", path.display()))
    };
    if is_json {
        let mut de = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| fail(e.path().to_string(), e.inner().to_string()))
    } else {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| fail(e.path().to_string(), e.inner().message().to_string()))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = parse_config(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Makes relative input paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.panel, &mut self.factor, &mut self.backtest.market].into_iter().flatten() {
            fix(p);
        }
        if let Predictor::File { path } = &mut self.backtest.predictor {
            fix(path);
        }
    }

    /// Hex SHA-256 of the canonical JSON of the effective configuration.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn require_panel(&self) -> Result<&Path, RunError> {
        let path = self.panel.as_deref().ok_or_else(|| RunError::Config("`panel` is not set".into()))?;
        require_file("panel", path)?;
        Ok(path)
    }

    pub fn require_factor(&self) -> Result<&Path, RunError> {
        let path = self
            .factor
            .as_deref()
            .ok_or_else(|| RunError::Config("`factor` is not set: premium needs an observable factor series".into()))?;
        require_file("factor", path)?;
        Ok(path)
    }
}

pub fn require_file(field: &str, path: &Path) -> Result<(), RunError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(RunError::Config(format!("`{field}` file {} does not exist", path.display())))
    }
}
