//! Per-(week, characteristic) double selection lasso regressions.
//!
//! For cell `(t, j)` the outcome lasso of returns on all characteristics and the
//! first-stage lasso of characteristic `j` on the others each select controls;
//! their union with the amelioration set enters a final OLS whose coefficient on
//! column `j` is the characteristic-portfolio return `ĉ_{t+1,j}`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::regress::{cv_lasso_lambda_with, fit_problem, log_grid, ols_fit, LassoOptions, StandardizedProblem};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LambdaPolicy {
    /// Cross-validate over a log grid from `λ_max` down to `ratio · λ_max`.
    CrossValidated { n_points: usize, ratio: f64 },
    /// Cross-validate over an explicit grid.
    Grid { values: Vec<f64> },
    /// Use one penalty without cross-validation.
    Fixed { value: f64 },
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::CrossValidated { n_points: 50, ratio: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DslConfig {
    /// Characteristic indices always kept as controls.
    pub amelioration: Vec<usize>,
    pub cv_folds: usize,
    pub lambda: LambdaPolicy,
    pub seed: u64,
    pub lasso: LassoOptions,
}

impl Default for DslConfig {
    fn default() -> Self {
        Self {
            amelioration: Vec::new(),
            cv_folds: 5,
            lambda: LambdaPolicy::default(),
            seed: 0,
            lasso: LassoOptions::default(),
        }
    }
}

impl DslConfig {
    pub fn validate(&self, p: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &j in &self.amelioration {
            if j >= p {
                return Err(Error::Input(format!("amelioration index {j} out of range for p = {p}")));
            }
            if !seen.insert(j) {
                return Err(Error::Input(format!("duplicate amelioration index {j}")));
            }
        }
        if self.cv_folds < 2 {
            return Err(Error::Input("cv_folds must be >= 2".into()));
        }
        Ok(())
    }

    /// Smallest cross-section a cell is estimated on.
    pub fn min_cross_section(&self) -> usize {
        5.max(self.amelioration.len() + 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum CellEstimate {
    Valid { c_hat: f64, selected: Vec<usize> },
    Invalid { reason: InvalidCell },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidCell {
    TooSmall { n: usize, required: usize },
    DegenerateColumn,
}

impl CellEstimate {
    pub fn c_hat(&self) -> Option<f64> {
        match self {
            CellEstimate::Valid { c_hat, .. } => Some(*c_hat),
            CellEstimate::Invalid { .. } => None,
        }
    }
}

fn select_penalty(
    problem: &StandardizedProblem,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &DslConfig,
    seed: u64,
) -> Result<f64> {
    let folds = cfg.cv_folds.min(x.nrows());
    match &cfg.lambda {
        LambdaPolicy::Fixed { value } => Ok(*value),
        LambdaPolicy::Grid { values } => cv_lasso_lambda_with(x, y, folds, values, seed, &cfg.lasso),
        LambdaPolicy::CrossValidated { n_points, ratio } => {
            let grid = log_grid(problem.lambda_max(), *n_points, *ratio);
            if grid.len() == 1 {
                return Ok(grid[0]);
            }
            cv_lasso_lambda_with(x, y, folds, &grid, seed, &cfg.lasso)
        }
    }
}

/// Support of a cross-validated lasso of `y` on `x`.
fn lasso_support(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &DslConfig, seed: u64) -> Result<Vec<usize>> {
    let problem = StandardizedProblem::new(x, y)?;
    let lambda = select_penalty(&problem, x, y, cfg, seed)?;
    Ok(fit_problem(&problem, lambda, &cfg.lasso).active_set)
}

fn check_cross_section(z: &DMatrix<f64>, r: &DVector<f64>, cfg: &DslConfig) -> Result<Option<InvalidCell>> {
    if z.nrows() != r.len() {
        return Err(Error::Input(format!("{} characteristic rows vs {} returns", z.nrows(), r.len())));
    }
    cfg.validate(z.ncols())?;
    let required = cfg.min_cross_section();
    if z.nrows() < required {
        return Ok(Some(InvalidCell::TooSmall { n: z.nrows(), required }));
    }
    Ok(None)
}

/// Outcome-equation support (stage one), shared by every `j` of a cross-section.
fn outcome_support(z: &DMatrix<f64>, r: &DVector<f64>, cfg: &DslConfig) -> Result<Vec<usize>> {
    lasso_support(z, r, cfg, derive_seed(cfg.seed, &[0]))
}

fn cell_given_outcome(
    z: &DMatrix<f64>,
    r: &DVector<f64>,
    j: usize,
    outcome: &[usize],
    cfg: &DslConfig,
) -> Result<CellEstimate> {
    let (n, p) = z.shape();
    let target = z.column(j);
    let mean = target.mean();
    let var = target.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var.sqrt() <= 1e-12 * (1.0 + mean.abs()) {
        return Ok(CellEstimate::Invalid { reason: InvalidCell::DegenerateColumn });
    }

    let mut selected: BTreeSet<usize> = outcome.iter().copied().filter(|&l| l != j).collect();
    if p > 1 {
        let others: Vec<usize> = (0..p).filter(|&l| l != j).collect();
        let controls = z.select_columns(&others);
        let first_stage = lasso_support(&controls, &target.into_owned(), cfg, derive_seed(cfg.seed, &[1, j as u64]))?;
        selected.extend(first_stage.into_iter().map(|l| others[l]));
    }
    selected.extend(cfg.amelioration.iter().copied().filter(|&l| l != j));

    let mut cols = Vec::with_capacity(selected.len() + 1);
    cols.push(j);
    cols.extend(selected.iter().copied());
    let design = z.select_columns(&cols);
    let ols = ols_fit(&design, r)?;
    Ok(CellEstimate::Valid { c_hat: ols.coef[0], selected: selected.into_iter().collect() })
}

/// Double selection lasso estimate of the characteristic-portfolio return for
/// column `j` of one cross-section.
pub fn dsl_single(z: &DMatrix<f64>, r: &DVector<f64>, j: usize, cfg: &DslConfig) -> Result<CellEstimate> {
    if j >= z.ncols() {
        return Err(Error::Input(format!("characteristic index {j} out of range for p = {}", z.ncols())));
    }
    if let Some(reason) = check_cross_section(z, r, cfg)? {
        return Ok(CellEstimate::Invalid { reason });
    }
    let outcome = outcome_support(z, r, cfg)?;
    cell_given_outcome(z, r, j, &outcome, cfg)
}

/// All `p` cells of one cross-section.
pub fn dsl_cross_section(z: &DMatrix<f64>, r: &DVector<f64>, cfg: &DslConfig) -> Result<Vec<CellEstimate>> {
    if let Some(reason) = check_cross_section(z, r, cfg)? {
        return Ok(vec![CellEstimate::Invalid { reason }; z.ncols()]);
    }
    let outcome = outcome_support(z, r, cfg)?;
    (0..z.ncols())
        .into_par_iter()
        .map(|j| cell_given_outcome(z, r, j, &outcome, cfg))
        .collect()
}

/// `T × p` matrix of estimated characteristic-portfolio returns with a
/// validity mask. Invalid cells hold zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharPortfolioMatrix {
    #[serde(with = "crate::serde_matrix")]
    pub values: DMatrix<f64>,
    /// Row-major `T × p` validity flags.
    pub valid: Vec<Vec<bool>>,
    pub weeks: Vec<u32>,
    pub char_names: Vec<String>,
}

impl CharPortfolioMatrix {
    pub fn new(values: DMatrix<f64>, valid: Vec<Vec<bool>>, weeks: Vec<u32>, char_names: Vec<String>) -> Result<Self> {
        let (t, p) = values.shape();
        if valid.len() != t || valid.iter().any(|row| row.len() != p) || weeks.len() != t || char_names.len() != p {
            return Err(Error::Input("inconsistent characteristic-portfolio matrix shapes".into()));
        }
        let mut values = values;
        for (i, row) in valid.iter().enumerate() {
            for (j, &ok) in row.iter().enumerate() {
                if !ok {
                    values[(i, j)] = 0.0;
                } else if !values[(i, j)].is_finite() {
                    return Err(Error::Numeric(format!("non-finite valid cell ({i}, {j})")));
                }
            }
        }
        Ok(Self { values, valid, weeks, char_names })
    }

    /// Every cell valid.
    pub fn from_complete(values: DMatrix<f64>, weeks: Vec<u32>, char_names: Vec<String>) -> Result<Self> {
        let valid = vec![vec![true; values.ncols()]; values.nrows()];
        Self::new(values, valid, weeks, char_names)
    }

    /// Every cell valid with default week and characteristic labels.
    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        let weeks = (0..values.nrows() as u32).collect();
        let names = (0..values.ncols()).map(|j| format!("c{j}")).collect();
        Self::from_complete(values, weeks, names).expect("finite complete matrix")
    }

    pub fn n_weeks(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_chars(&self) -> usize {
        self.values.ncols()
    }

    pub fn row_is_complete(&self, i: usize) -> bool {
        self.valid[i].iter().all(|&v| v)
    }

    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.n_weeks()).filter(|&i| self.row_is_complete(i)).collect()
    }

    /// Matrix of fully valid rows and their week labels.
    pub fn complete_submatrix(&self) -> (DMatrix<f64>, Vec<u32>) {
        let rows = self.complete_rows();
        (self.values.select_rows(&rows), rows.iter().map(|&i| self.weeks[i]).collect())
    }

    /// Copy restricted to the given row positions (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(rows),
            valid: rows.iter().map(|&i| self.valid[i].clone()).collect(),
            weeks: rows.iter().map(|&i| self.weeks[i]).collect(),
            char_names: self.char_names.clone(),
        }
    }

    /// CSV dump: one row per week, blank for invalid cells.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "week")?;
        for name in &self.char_names {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for i in 0..self.n_weeks() {
            write!(out, "{}", self.weeks[i])?;
            for j in 0..self.n_chars() {
                if self.valid[i][j] {
                    write!(out, ",{}", self.values[(i, j)])?;
                } else {
                    write!(out, ",")?;
                }
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Seed used for the cross-section of `week`: cells keep their estimates when
/// the panel is sliced or resampled.
pub fn week_seed(base: u64, week: u32) -> u64 {
    derive_seed(base, &[u64::from(week)])
}

/// Runs the double selection lasso over every week and characteristic in parallel.
pub fn build_char_portfolio_matrix(panel: &Panel, cfg: &DslConfig) -> Result<CharPortfolioMatrix> {
    let p = panel.n_chars();
    cfg.validate(p)?;
    let rows: Vec<Vec<CellEstimate>> = (0..panel.n_weeks())
        .into_par_iter()
        .map(|idx| {
            let (z, r) = panel.cross_section(idx);
            let week_cfg = DslConfig { seed: week_seed(cfg.seed, panel.weeks()[idx]), ..cfg.clone() };
            dsl_cross_section(&z, &r, &week_cfg)
        })
        .collect::<Result<_>>()?;

    let t = rows.len();
    let mut values = DMatrix::zeros(t, p);
    let mut valid = vec![vec![false; p]; t];
    for (i, cells) in rows.iter().enumerate() {
        for (j, cell) in cells.iter().enumerate() {
            if let Some(c) = cell.c_hat() {
                values[(i, j)] = c;
                valid[i][j] = true;
            }
        }
    }
    if valid.iter().flatten().all(|v| !v) {
        return Err(Error::Estimation("every double selection cell is invalid".into()));
    }
    CharPortfolioMatrix::new(values, valid, panel.weeks().to_vec(), panel.char_names().to_vec())
}
