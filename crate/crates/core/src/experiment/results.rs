use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Protocol;
use crate::error::{Error, Result};
use crate::learners::LearnerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// At least one cell failed; rows only aggregate the cells that ran.
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedValues {
    pub seed: u64,
    /// One value per column, in percent.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub learner: LearnerKind,
    pub per_seed: Vec<SeedValues>,
    /// Arithmetic mean over `per_seed`, column by column.
    pub mean: Vec<f64>,
    /// Variant this row is compared against.
    pub baseline: Option<String>,
    /// `mean − baseline.mean`, column by column.
    pub delta: Option<Vec<f64>>,
}

impl ResultRow {
    pub fn seed_values(&self, seed: u64) -> Option<&[f64]> {
        self.per_seed.iter().find(|s| s.seed == seed).map(|s| s.values.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub protocol: Protocol,
    pub status: RunStatus,
    pub seeds: Vec<u64>,
    /// Frozen encoder checksum, hex.
    pub encoder_checksum: String,
    pub columns: Vec<String>,
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

impl RunResult {
    pub fn row(&self, variant: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("results file: {e}")))
    }
}

pub fn load_results(dir: impl AsRef<Path>) -> Result<RunResult> {
    let path = dir.as_ref().join("results.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    RunResult::from_json(&text)
}

fn signed(v: f64) -> String {
    // Avoid printing "-0.00".
    let v = if v.abs() < 0.005 { 0.0 } else { v };
    format!("{v:+.2}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One line per row: means, then deltas.
pub fn render_csv(r: &RunResult) -> String {
    let mut out = String::from("variant,learner,seeds");
    for c in &r.columns {
        write!(out, ",{}", csv_field(c)).unwrap();
    }
    out.push_str(",baseline");
    for c in &r.columns {
        write!(out, ",{}", csv_field(&format!("delta_{c}"))).unwrap();
    }
    out.push('\n');
    for row in &r.rows {
        write!(out, "{},{},{}", csv_field(&row.variant), csv_field(row.learner.table_name()), row.per_seed.len()).unwrap();
        for v in &row.mean {
            write!(out, ",{v:.2}").unwrap();
        }
        write!(out, ",{}", row.baseline.as_deref().map(csv_field).unwrap_or_default()).unwrap();
        match &row.delta {
            Some(d) => d.iter().for_each(|v| write!(out, ",{}", signed(*v)).unwrap()),
            None => r.columns.iter().for_each(|_| out.push(',')),
        }
        out.push('\n');
    }
    out
}

/// One line per (row, seed).
pub fn render_seeds_csv(r: &RunResult) -> String {
    let mut out = String::from("variant,learner,seed");
    for c in &r.columns {
        write!(out, ",{}", csv_field(c)).unwrap();
    }
    out.push('\n');
    for row in &r.rows {
        for s in &row.per_seed {
            write!(out, "{},{},{}", csv_field(&row.variant), csv_field(row.learner.table_name()), s.seed).unwrap();
            for v in &s.values {
                write!(out, ",{v:.2}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

/// Aligned plain-text table: one row per variant, mean columns followed by
/// signed deltas against the row's baseline.
pub fn render_text(r: &RunResult) -> String {
    let has_delta = r.rows.iter().any(|row| row.delta.is_some());
    let mut header: Vec<String> = vec!["".into()];
    header.extend(r.columns.iter().cloned());
    if has_delta {
        header.extend(r.columns.iter().map(|c| format!("Δ{c}")));
        header.push("vs".into());
    }
    let mut lines: Vec<Vec<String>> = vec![header];
    for row in &r.rows {
        let mut l = vec![row.variant.clone()];
        l.extend(row.mean.iter().map(|v| format!("{v:.2}")));
        if has_delta {
            match &row.delta {
                Some(d) => l.extend(d.iter().map(|v| signed(*v))),
                None => l.extend(r.columns.iter().map(|_| String::new())),
            }
            l.push(row.baseline.clone().unwrap_or_default());
        }
        lines.push(l);
    }
    let ncol = lines[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
    let mut out = format!("{} ({}), seeds {}\n", r.name, r.protocol, seeds);
    for l in &lines {
        let mut s = String::new();
        for (c, cell) in l.iter().enumerate() {
            let pad = widths[c] - cell.chars().count();
            if c == 0 || c == ncol - 1 && has_delta {
                s.push_str(cell);
                s.extend(std::iter::repeat_n(' ', pad));
            } else {
                s.extend(std::iter::repeat_n(' ', pad));
                s.push_str(cell);
            }
            s.push_str("  ");
        }
        out.push_str(s.trim_end());
        out.push('\n');
    }
    if r.status == RunStatus::Partial {
        out.push_str("INCOMPLETE:\n");
        for f in &r.failures {
            writeln!(out, "  {} seed {}: {}", f.cell, f.seed, f.error).unwrap();
        }
    }
    out
}
