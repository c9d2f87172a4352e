use thiserror::Error;

/// A single rejected input row with the reason it was rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RowIssue {
    /// 1-based data line (header excluded).
    pub line: usize,
    pub reason: String,
}

impl std::fmt::Display for RowIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "row {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("duplicate key: asset {asset} appears twice in week {week}")]
    DuplicateKey { asset: String, week: u32 },

    #[error("empty panel: {0}")]
    EmptyPanel(String),

    #[error("invalid rows: {}", format_issues(.0))]
    InvalidRows(Vec<RowIssue>),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("monte carlo suite failed: {failed} of {total} draws failed; first failures: {}", .diagnostics.join("; "))]
    Suite {
        failed: usize,
        total: usize,
        diagnostics: Vec<String>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_issues(issues: &[RowIssue]) -> String {
    const SHOWN: usize = 10;
    let mut out: Vec<String> = issues.iter().take(SHOWN).map(ToString::to_string).collect();
    if issues.len() > SHOWN {
        out.push(format!("... and {} more", issues.len() - SHOWN));
    }
    out.join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
