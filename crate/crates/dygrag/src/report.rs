//! Final reports over evaluation artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dygrag_core::metrics::MeanStd;

use crate::error::{format_error, Result};
use crate::formats::read_text;

/// One evaluated seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    /// Config hash of the evaluation stage.
    pub hash: String,
    pub dir: PathBuf,
}

/// Seeds aggregated into one report row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub runs: Vec<RunRecord>,
}

/// `name=value` lines of an evaluation's `metrics.txt`, in file order.
pub fn read_metrics(dir: &Path) -> Result<Vec<(String, f64)>> {
    let path = dir.join("metrics.txt");
    let text = read_text(&path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| format_error(&path, i + 1, "expected `name=value`"))?;
            let v = v.trim().parse().map_err(|_| format_error(&path, i + 1, format!("bad value `{v}`")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

/// Per-row mean and sample standard deviation over seeds of every metric,
/// as an aligned table followed by `[label]` blocks of `metric=mean±std`
/// lines and the aggregated config hashes. Output depends only on the
/// artifact contents.
pub fn emit_report(rows: &[ReportRow]) -> Result<String> {
    let rows: Vec<&ReportRow> = rows.iter().filter(|r| !r.runs.is_empty()).collect();
    if rows.is_empty() {
        return Ok("nothing to report\n".into());
    }
    let mut summaries = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for row in &rows {
        let per_seed = row.runs.iter().map(|r| read_metrics(&r.dir)).collect::<Result<Vec<_>>>()?;
        let mut names: Vec<String> = Vec::new();
        for m in &per_seed {
            for (k, _) in m {
                if !names.contains(k) {
                    names.push(k.clone());
                }
            }
        }
        let summary: Vec<(String, MeanStd)> = names
            .iter()
            .map(|n| {
                let vals: Vec<f64> = per_seed
                    .iter()
                    .filter_map(|m| m.iter().find(|(k, _)| k == n).map(|(_, v)| *v))
                    .collect();
                (n.clone(), MeanStd::of(&vals))
            })
            .collect();
        for n in names {
            if !columns.contains(&n) {
                columns.push(n);
            }
        }
        summaries.push(summary);
    }
    let shown: Vec<&String> = columns.iter().filter(|c| c.contains('@')).collect();

    let mut cells: Vec<Vec<String>> = vec![
        std::iter::once("row".to_string())
            .chain(shown.iter().map(|c| c.to_string()))
            .chain(["seeds".to_string()])
            .collect(),
    ];
    for (row, summary) in rows.iter().zip(&summaries) {
        let mut line = vec![row.label.clone()];
        for c in &shown {
            line.push(match summary.iter().find(|(n, _)| n == *c) {
                Some((_, s)) => format!("{:.4}±{:.4}", s.mean, s.std),
                None => "-".into(),
            });
        }
        line.push(row.runs.len().to_string());
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|i| cells.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();

    let mut out = String::new();
    writeln!(out, "# dygrag report: {} row(s), mean±std over seeds", rows.len()).unwrap();
    for line in &cells {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        writeln!(out, "{}", padded.join("  ").trim_end()).unwrap();
    }
    for (row, summary) in rows.iter().zip(&summaries) {
        writeln!(out, "\n[{}]", row.label).unwrap();
        for (n, s) in summary {
            writeln!(out, "{n}={:.6}±{:.6}", s.mean, s.std).unwrap();
        }
        for r in &row.runs {
            writeln!(out, "evaluate.seed{}={}", r.seed, r.hash).unwrap();
        }
    }
    Ok(out)
}
