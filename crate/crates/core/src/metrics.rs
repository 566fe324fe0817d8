//! Recall@k, NDCG@k and top-k Jaccard, plus run aggregation.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

fn top_k(ranked: &[usize], k: usize) -> BTreeSet<usize> {
    ranked.iter().take(k).copied().collect()
}

/// `|top-k ∩ truth| / |truth|`; `None` when `truth` is empty.
pub fn recall_at_k(ranked: &[usize], truth: &BTreeSet<usize>, k: usize) -> Option<f64> {
    if truth.is_empty() || k == 0 {
        return None;
    }
    let hits = top_k(ranked, k).intersection(truth).count();
    Some(hits as f64 / truth.len() as f64)
}

/// Binary-relevance NDCG with gain `1 / log2(pos + 1)` (positions from 1).
pub fn ndcg_at_k(ranked: &[usize], truth: &BTreeSet<usize>, k: usize) -> Option<f64> {
    if truth.is_empty() || k == 0 {
        return None;
    }
    let gain = |pos: usize| 1.0 / libm::log2(pos as f64 + 1.0);
    let mut seen = BTreeSet::new();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, n)| truth.contains(n) && seen.insert(**n))
        .map(|(i, _)| gain(i + 1))
        .sum();
    let idcg: f64 = (1..=truth.len().min(k)).map(gain).sum();
    Some(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

/// Jaccard between the distinct top-k predictions and the truth set;
/// `None` when both are empty.
pub fn jaccard_metric(ranked: &[usize], truth: &BTreeSet<usize>, k: usize) -> Option<f64> {
    let pred = top_k(ranked, k);
    let union = pred.union(truth).count();
    if union == 0 {
        return None;
    }
    Some(pred.intersection(truth).count() as f64 / union as f64)
}

pub const METRIC_NAMES: [&str; 3] = ["recall", "ndcg", "jaccard"];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub query: usize,
    pub ranked: Vec<usize>,
    pub truth: BTreeSet<usize>,
    /// Recall, NDCG, Jaccard in [`METRIC_NAMES`] order.
    pub values: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for fewer than two values).
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub k: usize,
    pub records: Vec<EvalRecord>,
    /// Queries excluded because their truth set was empty.
    pub skipped: Vec<usize>,
    pub summary: [MeanStd; 3],
}

impl RunReport {
    pub fn metric(&self, name: &str) -> Option<MeanStd> {
        METRIC_NAMES.iter().position(|m| *m == name).map(|i| self.summary[i])
    }

    /// Lines of the form `recall@5=0.123456±0.012345`.
    pub fn key_values(&self) -> Vec<String> {
        METRIC_NAMES
            .iter()
            .zip(&self.summary)
            .map(|(n, s)| alloc::format!("{n}@{}={:.6}±{:.6}", self.k, s.mean, s.std))
            .collect()
    }
}

/// Scores aligned prediction and truth lists, keyed by query id.
pub fn evaluate_run(
    predictions: &[(usize, Vec<usize>)],
    truths: &[(usize, BTreeSet<usize>)],
    k: usize,
) -> Result<RunReport> {
    if k == 0 {
        return Err(invalid("evaluate_run", "k must be at least 1"));
    }
    let pred_ids: BTreeSet<usize> = predictions.iter().map(|p| p.0).collect();
    let truth_ids: BTreeSet<usize> = truths.iter().map(|t| t.0).collect();
    if pred_ids != truth_ids || pred_ids.len() != predictions.len() || truth_ids.len() != truths.len() {
        let offenders: Vec<String> = pred_ids
            .symmetric_difference(&truth_ids)
            .map(|q| alloc::format!("{q}"))
            .collect();
        return Err(Error::InvalidArgument {
            op: "evaluate_run",
            msg: alloc::format!("query ids do not align (duplicates or mismatches): [{}]", offenders.join(", ")),
        });
    }
    let mut truth_sorted: Vec<&(usize, BTreeSet<usize>)> = truths.iter().collect();
    truth_sorted.sort_by_key(|t| t.0);
    let mut pred_sorted: Vec<&(usize, Vec<usize>)> = predictions.iter().collect();
    pred_sorted.sort_by_key(|p| p.0);
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (p, t) in pred_sorted.into_iter().zip(truth_sorted) {
        let (Some(r), Some(n), Some(j)) = (recall_at_k(&p.1, &t.1, k), ndcg_at_k(&p.1, &t.1, k), jaccard_metric(&p.1, &t.1, k)) else {
            skipped.push(p.0);
            continue;
        };
        records.push(EvalRecord {
            query: p.0,
            ranked: p.1.clone(),
            truth: t.1.clone(),
            values: [r, n, j],
        });
    }
    let summary = core::array::from_fn(|i| MeanStd::of(&records.iter().map(|r| r.values[i]).collect::<Vec<_>>()));
    Ok(RunReport {
        k,
        records,
        skipped,
        summary,
    })
}

/// Aggregates per-seed run means: mean and sample std of each metric across runs.
pub fn aggregate_runs(runs: &[RunReport]) -> [MeanStd; 3] {
    core::array::from_fn(|i| MeanStd::of(&runs.iter().map(|r| r.summary[i].mean).collect::<Vec<_>>()))
}
