//! Double selection lasso factor model.
//!
//! Characteristic-portfolio returns are estimated week by week with double
//! selection lasso regressions, decomposed by PCA into latent factors and
//! row-sparse loadings, and used for risk-premium inference on observable
//! factors, asset-pricing tests, Monte Carlo studies and quintile backtests.

pub mod aptests;
pub mod backtest;
pub mod dsl;
pub mod error;
pub mod factor;
pub mod linalg;
pub mod panel;
pub mod regress;
pub mod risk_premium;
pub mod seed;
pub mod simulate;
pub(crate) mod serde_matrix;

pub use error::{Error, Result};
pub use panel::{load_panel, Panel, PanelRow, PanelSchema};
