use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, UrclError};

use super::train::SUMMARY_HEADER;

/// One parsed `summary.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub segment: String,
    pub strategy: String,
    pub mae: f64,
    pub rmse: f64,
    pub train_seconds: f64,
    pub infer_seconds_per_window: f64,
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(UrclError::Schema(format!("{} lacks the summary header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != 6 {
                return Err(UrclError::Schema(format!(
                    "{} row {}: expected 6 cells",
                    path.display(),
                    i + 2
                )));
            }
            let num = |c: usize| -> Result<f64> {
                cells[c].parse().map_err(|_| UrclError::Parse {
                    file: path.display().to_string(),
                    row: i + 2,
                    column: c + 1,
                    message: format!("'{}' is not a number", cells[c]),
                })
            };
            Ok(SummaryRow {
                segment: cells[0].to_string(),
                strategy: cells[1].to_string(),
                mae: num(2)?,
                rmse: num(3)?,
                train_seconds: num(4)?,
                infer_seconds_per_window: num(5)?,
            })
        })
        .collect()
}

/// Every `summary.csv` at or below `root`, sorted by path.
pub fn find_summaries(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "summary.csv") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Mean MAE/RMSE per (strategy, segment) across all runs found under `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub segments: Vec<String>,
    /// strategy -> segment -> (mean MAE, mean RMSE, runs)
    pub cells: BTreeMap<String, BTreeMap<String, (f64, f64, usize)>>,
}

pub fn aggregate(root: &Path) -> Result<ComparisonTable> {
    let files = find_summaries(root)?;
    if files.is_empty() {
        return Err(UrclError::Ingest(format!("no summary.csv under {}", root.display())));
    }
    let mut sums: BTreeMap<String, BTreeMap<String, (f64, f64, usize)>> = BTreeMap::new();
    let mut segments: Vec<String> = Vec::new();
    for f in files {
        for row in read_summary(&f)? {
            if !segments.contains(&row.segment) {
                segments.push(row.segment.clone());
            }
            let e = sums
                .entry(row.strategy)
                .or_default()
                .entry(row.segment)
                .or_insert((0.0, 0.0, 0));
            e.0 += row.mae;
            e.1 += row.rmse;
            e.2 += 1;
        }
    }
    segments.sort_by_key(|s| segment_order(s));
    for per in sums.values_mut() {
        for v in per.values_mut() {
            v.0 /= v.2 as f64;
            v.1 /= v.2 as f64;
        }
    }
    Ok(ComparisonTable { segments, cells: sums })
}

fn segment_order(s: &str) -> (usize, String) {
    match s.strip_prefix("incremental_").and_then(|k| k.parse::<usize>().ok()) {
        Some(k) => (k, String::new()),
        None if s == "base" => (0, String::new()),
        None => (usize::MAX, s.to_string()),
    }
}

impl ComparisonTable {
    /// CSV with one row per strategy and `MAE`/`RMSE` columns per segment.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy");
        for s in &self.segments {
            out.push_str(&format!(",{s}_MAE,{s}_RMSE"));
        }
        out.push('\n');
        for (strategy, per) in &self.cells {
            out.push_str(strategy);
            for s in &self.segments {
                match per.get(s) {
                    Some((mae, rmse, _)) => out.push_str(&format!(",{mae:.4},{rmse:.4}")),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width text rendering for the terminal.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<12}", "strategy");
        for s in &self.segments {
            out.push_str(&format!(" {:>22}", format!("{s} MAE/RMSE")));
        }
        out.push('\n');
        for (strategy, per) in &self.cells {
            out.push_str(&format!("{strategy:<12}"));
            for s in &self.segments {
                let cell = per
                    .get(s)
                    .map(|(m, r, _)| format!("{m:.3}/{r:.3}"))
                    .unwrap_or_else(|| "-".into());
                out.push_str(&format!(" {cell:>22}"));
            }
            out.push('\n');
        }
        out
    }
}
