//! BM25 and input-set Jaccard baselines over history node tokens.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use super::{eligible, set_jaccard, top_k, Eligibility, RankedDemos};
use crate::error::{Error, Result};
use crate::sequencer::EgoSample;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

fn query_terms(query: &EgoSample) -> Result<BTreeSet<usize>> {
    let terms: BTreeSet<usize> = query.history_nodes().into_iter().collect();
    if terms.is_empty() {
        Err(Error::NoSignal)
    } else {
        Ok(terms)
    }
}

/// BM25 score of every pool document for the query's distinct history
/// nodes. Document statistics cover the whole pool.
pub fn bm25_scores(query: &EgoSample, pool: &[EgoSample]) -> Result<Vec<f64>> {
    let terms = query_terms(query)?;
    let docs: Vec<Vec<usize>> = pool.iter().map(EgoSample::history_nodes).collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n.max(1.0);
    let mut df: BTreeMap<usize, usize> = BTreeMap::new();
    for d in &docs {
        for t in d.iter().collect::<BTreeSet<_>>() {
            *df.entry(*t).or_default() += 1;
        }
    }
    let idf: BTreeMap<usize, f64> = terms
        .iter()
        .map(|t| {
            let nt = df.get(t).copied().unwrap_or(0) as f64;
            (*t, libm::log(1.0 + (n - nt + 0.5) / (nt + 0.5)))
        })
        .collect();
    Ok(docs
        .iter()
        .map(|d| {
            let norm = if avgdl > 0.0 { d.len() as f64 / avgdl } else { 0.0 };
            terms
                .iter()
                .map(|t| {
                    let tf = d.iter().filter(|x| *x == t).count() as f64;
                    if tf == 0.0 {
                        0.0
                    } else {
                        idf[t] * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
                    }
                })
                .sum()
        })
        .collect())
}

/// Fails with [`Error::NoSignal`] for a history-free query.
pub fn bm25_rank(query_id: usize, query: &EgoSample, pool: &[EgoSample], k: usize, rule: Eligibility) -> Result<RankedDemos> {
    let scores = bm25_scores(query, pool)?;
    let scored = eligible(pool, query, rule).map(|(i, _)| (i, scores[i])).collect();
    top_k(query_id, scored, k)
}

/// Jaccard between history node sets. Fails with [`Error::NoSignal`] for a
/// history-free query.
pub fn jaccard_rank(query_id: usize, query: &EgoSample, pool: &[EgoSample], k: usize, rule: Eligibility) -> Result<RankedDemos> {
    let terms = query_terms(query)?;
    let scored = eligible(pool, query, rule)
        .map(|(i, c)| (i, set_jaccard(&terms, &c.history_nodes().into_iter().collect())))
        .collect();
    top_k(query_id, scored, k)
}
