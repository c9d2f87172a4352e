//! Unbalanced asset-week panel: ingestion, validation, rank normalization and
//! week slicing.
//!
//! A row keyed by `(asset_id, week)` carries the characteristics observed at
//! `week` and the excess return realized over the following week.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowIssue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub asset_id: String,
    pub week: u32,
    /// Excess return realized from `week` to `week + 1`.
    pub ret: f64,
    pub chars: Vec<f64>,
    pub market_cap: Option<f64>,
}

/// Immutable validated panel. Rows are stored sorted by `(week, asset_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    rows: Vec<PanelRow>,
    char_names: Vec<String>,
    weeks: Vec<u32>,
    week_ranges: Vec<Range<usize>>,
    assets: Vec<String>,
}

/// Column-name mapping for [`load_panel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelSchema {
    pub asset_col: String,
    pub week_col: String,
    pub ret_col: String,
    /// Optional market capitalization column; never treated as a characteristic.
    pub market_cap_col: Option<String>,
    /// Explicit characteristic columns. `None` takes every remaining column in
    /// header order.
    pub char_cols: Option<Vec<String>>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        Self {
            asset_col: "asset_id".into(),
            week_col: "week".into(),
            ret_col: "ret".into(),
            market_cap_col: Some("market_cap".into()),
            char_cols: None,
        }
    }
}

impl Panel {
    /// Validates and sorts `rows`.
    pub fn new(mut rows: Vec<PanelRow>, char_names: Vec<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyPanel("no rows".into()));
        }
        let mut seen = HashSet::new();
        for name in &char_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate characteristic name `{name}`")));
            }
        }
        let p = char_names.len();
        let mut issues = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if row.chars.len() != p {
                issues.push(RowIssue {
                    line: i + 1,
                    reason: format!("expected {p} characteristics, found {}", row.chars.len()),
                });
                continue;
            }
            if !row.ret.is_finite() {
                issues.push(RowIssue { line: i + 1, reason: format!("non-finite return {}", row.ret) });
            }
            if let Some(j) = row.chars.iter().position(|v| !v.is_finite()) {
                issues.push(RowIssue {
                    line: i + 1,
                    reason: format!("non-finite characteristic `{}`", char_names[j]),
                });
            }
            if let Some(mc) = row.market_cap {
                if !(mc.is_finite() && mc >= 0.0) {
                    issues.push(RowIssue { line: i + 1, reason: format!("invalid market cap {mc}") });
                }
            }
        }
        if !issues.is_empty() {
            return Err(Error::InvalidRows(issues));
        }

        rows.sort_by(|a, b| a.week.cmp(&b.week).then_with(|| a.asset_id.cmp(&b.asset_id)));
        for w in rows.windows(2) {
            if w[0].week == w[1].week && w[0].asset_id == w[1].asset_id {
                return Err(Error::DuplicateKey { asset: w[0].asset_id.clone(), week: w[0].week });
            }
        }
        Ok(Self::from_sorted(rows, char_names))
    }

    fn from_sorted(rows: Vec<PanelRow>, char_names: Vec<String>) -> Self {
        let mut weeks = Vec::new();
        let mut week_ranges = Vec::new();
        let mut start = 0;
        for i in 1..=rows.len() {
            if i == rows.len() || rows[i].week != rows[start].week {
                weeks.push(rows[start].week);
                week_ranges.push(start..i);
                start = i;
            }
        }
        let mut assets: Vec<String> = rows.iter().map(|r| r.asset_id.clone()).collect();
        assets.sort();
        assets.dedup();
        Self { rows, char_names, weeks, week_ranges, assets }
    }

    pub fn rows(&self) -> &[PanelRow] {
        &self.rows
    }

    pub fn char_names(&self) -> &[String] {
        &self.char_names
    }

    pub fn n_chars(&self) -> usize {
        self.char_names.len()
    }

    /// Sorted distinct weeks.
    pub fn weeks(&self) -> &[u32] {
        &self.weeks
    }

    pub fn n_weeks(&self) -> usize {
        self.weeks.len()
    }

    /// Sorted distinct asset ids.
    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    /// Rows of the `idx`-th week (position in [`Panel::weeks`]).
    pub fn week_rows(&self, idx: usize) -> &[PanelRow] {
        &self.rows[self.week_ranges[idx].clone()]
    }

    pub fn week_position(&self, week: u32) -> Option<usize> {
        self.weeks.binary_search(&week).ok()
    }

    /// Characteristics (`N_t × p`) and returns of the `idx`-th cross-section.
    pub fn cross_section(&self, idx: usize) -> (DMatrix<f64>, DVector<f64>) {
        let rows = self.week_rows(idx);
        let p = self.n_chars();
        let z = DMatrix::from_fn(rows.len(), p, |i, j| rows[i].chars[j]);
        let r = DVector::from_iterator(rows.len(), rows.iter().map(|row| row.ret));
        (z, r)
    }

    pub fn has_market_caps(&self) -> bool {
        self.rows.iter().all(|r| r.market_cap.is_some())
    }

    /// Replaces characteristics within each week by mean-rank scores on `[0, 1]`.
    pub fn normalize_characteristics(&self) -> Panel {
        let mut rows = self.rows.clone();
        let p = self.n_chars();
        for range in &self.week_ranges {
            let block = &mut rows[range.clone()];
            let n = block.len();
            for j in 0..p {
                let values: Vec<f64> = block.iter().map(|r| r.chars[j]).collect();
                let scores = rank_scores(&values);
                for (row, s) in block.iter_mut().zip(scores) {
                    row.chars[j] = s;
                }
            }
            debug_assert!(n >= 1);
        }
        Self::from_sorted(rows, self.char_names.clone())
    }

    /// Sub-panel with weeks in `[from, to]`.
    pub fn slice_weeks(&self, from: u32, to: u32) -> Result<Panel> {
        if from > to {
            return Err(Error::Input(format!("slice bounds reversed: {from} > {to}")));
        }
        let rows: Vec<PanelRow> =
            self.rows.iter().filter(|r| r.week >= from && r.week <= to).cloned().collect();
        if rows.is_empty() {
            return Err(Error::EmptyPanel(format!("no weeks in [{from}, {to}]")));
        }
        Ok(Self::from_sorted(rows, self.char_names.clone()))
    }

    /// Panel restricted to the given week positions.
    pub fn select_weeks(&self, positions: &[usize]) -> Result<Panel> {
        let rows: Vec<PanelRow> =
            positions.iter().flat_map(|&i| self.week_rows(i).iter().cloned()).collect();
        Panel::new(rows, self.char_names.clone())
    }

    /// Map from asset id to its rows, ordered by week.
    pub fn rows_by_asset(&self) -> BTreeMap<&str, Vec<&PanelRow>> {
        let mut map: BTreeMap<&str, Vec<&PanelRow>> = BTreeMap::new();
        for row in &self.rows {
            map.entry(row.asset_id.as_str()).or_default().push(row);
        }
        map
    }
}

/// Mean-rank scores `(rank - 1) / (n - 1)`; a single value maps to 0.5.
pub fn rank_scores(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0.5];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut scores = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut k = i;
        while k + 1 < n && values[order[k + 1]] == values[order[i]] {
            k += 1;
        }
        // ranks i+1..=k+1 share their mean
        let mean_rank = (i + k) as f64 / 2.0 + 1.0;
        let score = (mean_rank - 1.0) / (n - 1) as f64;
        for &idx in &order[i..=k] {
            scores[idx] = score;
        }
        i = k + 1;
    }
    scores
}

/// Reads a panel CSV (header row, UTF-8, `.` decimal separator).
pub fn load_panel(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<Panel> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    read_panel(&mut reader, schema)
}

/// Same as [`load_panel`] over any reader.
pub fn read_panel_from<R: std::io::Read>(input: R, schema: &PanelSchema) -> Result<Panel> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    read_panel(&mut reader, schema)
}

fn read_panel<R: std::io::Read>(reader: &mut csv::Reader<R>, schema: &PanelSchema) -> Result<Panel> {
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let col = |name: &str| find(name).ok_or_else(|| Error::Schema(format!("missing column `{name}`")));

    let asset_idx = col(&schema.asset_col)?;
    let week_idx = col(&schema.week_col)?;
    let ret_idx = col(&schema.ret_col)?;
    let mcap_idx = schema.market_cap_col.as_deref().and_then(find);

    let char_idx: Vec<usize> = match &schema.char_cols {
        Some(cols) => cols.iter().map(|c| col(c)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&i| i != asset_idx && i != week_idx && i != ret_idx && Some(i) != mcap_idx)
            .collect(),
    };
    if char_idx.is_empty() {
        return Err(Error::Schema("no characteristic columns".into()));
    }
    let char_names: Vec<String> = char_idx.iter().map(|&i| headers[i].trim().to_string()).collect();

    let mut rows = Vec::new();
    let mut issues = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let line = line + 1;
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parse = |i: usize, what: &str| -> std::result::Result<f64, String> {
            let s = field(i);
            let v: f64 = s.parse().map_err(|_| format!("cannot parse {what} `{s}`"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite {what} `{s}`"))
            }
        };

        let week = match field(week_idx).parse::<u32>() {
            Ok(w) => w,
            Err(_) => {
                issues.push(RowIssue { line, reason: format!("bad week `{}`", field(week_idx)) });
                continue;
            }
        };
        let ret = match parse(ret_idx, "return") {
            Ok(v) => v,
            Err(reason) => {
                issues.push(RowIssue { line, reason });
                continue;
            }
        };
        let mut chars = Vec::with_capacity(char_idx.len());
        let mut bad = None;
        for (&i, name) in char_idx.iter().zip(&char_names) {
            match parse(i, &format!("characteristic `{name}`")) {
                Ok(v) => chars.push(v),
                Err(reason) => {
                    bad = Some(reason);
                    break;
                }
            }
        }
        if let Some(reason) = bad {
            issues.push(RowIssue { line, reason });
            continue;
        }
        let market_cap = match mcap_idx {
            Some(i) if !field(i).is_empty() => match parse(i, "market cap") {
                Ok(v) => Some(v),
                Err(reason) => {
                    issues.push(RowIssue { line, reason });
                    continue;
                }
            },
            _ => None,
        };
        rows.push(PanelRow { asset_id: field(asset_idx).to_string(), week, ret, chars, market_cap });
    }
    if !issues.is_empty() {
        return Err(Error::InvalidRows(issues));
    }
    Panel::new(rows, char_names)
}
