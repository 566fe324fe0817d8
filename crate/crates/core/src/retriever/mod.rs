//! Demonstration retrieval: pool annotation, the contrastive retriever, and
//! lexical baselines.

mod contrastive;
mod lexical;

pub use contrastive::{
    augment, ccl_loss, ccl_loss_from_embeddings, in_batch_nce, tcl_loss, tcl_loss_from_embeddings, train_retriever,
    Augmentation, RetrieverConfig,
};
pub use lexical::{bm25_rank, bm25_scores, jaccard_rank, BM25_B, BM25_K1};

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::backbone::SequenceModel;
use crate::error::{invalid, Error, Result};
use crate::numerics::{Tape, Var};
use crate::sequencer::{EgoSample, Vocab};

/// Annotation threshold on output Jaccard.
pub const DEFAULT_THRESHOLD: f64 = 0.8;
/// Demonstrations per query.
pub const DEFAULT_K: usize = 7;

/// Set Jaccard; 0 when both sets are empty.
pub fn set_jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// Jaccard between the node sets of two output sequences.
pub fn output_jaccard(a: &EgoSample, b: &EgoSample) -> f64 {
    set_jaccard(&a.y_nodes(), &b.y_nodes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub threshold: f64,
    /// Positives of each pool sample, ascending.
    pub positives: Vec<Vec<usize>>,
}

impl Annotation {
    /// Ordered positive pairs.
    pub fn pair_count(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    /// Samples with no positive at all; they sit out contrastive training.
    pub fn without_positives(&self) -> usize {
        self.positives.iter().filter(|p| p.is_empty()).count()
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.positives.get(i).is_some_and(|p| p.binary_search(&j).is_ok())
    }
}

/// Marks every ordered pair `i != j` with output Jaccard at least `threshold`.
pub fn annotate_pool(pool: &[EgoSample], threshold: f64) -> Annotation {
    let sets: Vec<BTreeSet<usize>> = pool.iter().map(EgoSample::y_nodes).collect();
    let mut positives = alloc::vec![Vec::new(); pool.len()];
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            if set_jaccard(&sets[i], &sets[j]) >= threshold {
                positives[i].push(j);
                positives[j].push(i);
            }
        }
    }
    for p in &mut positives {
        p.sort_unstable();
    }
    Annotation { threshold, positives }
}

/// `exp(-lambda |t_q - t_p|)`.
pub fn time_decay(t_q: f64, t_p: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(invalid("time_decay", "lambda must be non-negative"));
    }
    Ok(libm::exp(-lambda * libm::fabs(t_q - t_p)))
}

/// Whether pool sample `candidate` strictly precedes `query` in time.
///
/// Queries with history compare raw last-interaction times. A history-free
/// query has no such time, so the candidate's target step must precede the
/// query's prediction step instead.
pub fn precedes(candidate: &EgoSample, query: &EgoSample) -> bool {
    if query.has_history() {
        candidate.last_time < query.last_time
    } else {
        candidate.prediction_step < query.prediction_step
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedDemos {
    pub query: usize,
    /// `(pool index, score)`, best first.
    pub candidates: Vec<(usize, f64)>,
}

impl RankedDemos {
    pub fn ids(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.0).collect()
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            query: self.query,
            candidates: self.candidates.iter().take(k).copied().collect(),
        }
    }
}

/// Which pool entries a query may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Eligibility {
    pub time_filter: bool,
    /// Pool index of the query itself, when the query is a pool member.
    pub exclude: Option<usize>,
}

impl Eligibility {
    pub const INFERENCE: Self = Self {
        time_filter: true,
        exclude: None,
    };

    pub fn pool_member(index: usize) -> Self {
        Self {
            time_filter: false,
            exclude: Some(index),
        }
    }

    fn allows(&self, index: usize, candidate: &EgoSample, query: &EgoSample) -> bool {
        self.exclude != Some(index) && (!self.time_filter || precedes(candidate, query))
    }
}

/// Sorts by score (descending), ties by ascending id, and keeps `k`.
pub(crate) fn top_k(query: usize, mut scored: Vec<(usize, f64)>, k: usize) -> Result<RankedDemos> {
    if scored.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(RankedDemos { query, candidates: scored })
}

pub(crate) fn eligible<'a>(
    pool: &'a [EgoSample],
    query: &'a EgoSample,
    rule: Eligibility,
) -> impl Iterator<Item = (usize, &'a EgoSample)> + 'a {
    pool.iter().enumerate().filter(move |(i, c)| rule.allows(*i, c, query))
}

/// The contrastive retriever: an encoder initialized from the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Retriever {
    pub model: SequenceModel,
    pub vocab: Vocab,
    /// Score with cosine similarity instead of a raw dot product.
    pub cosine: bool,
}

impl Retriever {
    pub fn embed_var(&self, tape: &mut Tape, sample_x: &[usize]) -> Result<Var> {
        let r = self.model.represent_var(tape, sample_x, self.vocab.pad_index())?;
        if self.cosine {
            normalize_row(tape, r)
        } else {
            Ok(r)
        }
    }

    pub fn embed(&self, sample: &EgoSample) -> Result<Vec<f64>> {
        let ids = self.vocab.encode(&sample.x)?;
        let mut tape = Tape::new();
        let v = self.embed_var(&mut tape, &ids)?;
        Ok(tape.value(v).to_vec())
    }

    pub fn index(&self, pool: &[EgoSample]) -> Result<PoolIndex> {
        Ok(PoolIndex {
            embeddings: pool.iter().map(|s| self.embed(s)).collect::<Result<_>>()?,
        })
    }

    /// Top-`k` pool samples by contextual similarity `f(x_q) . f(x_p)`.
    pub fn rank(
        &self,
        query_id: usize,
        query: &EgoSample,
        pool: &[EgoSample],
        index: &PoolIndex,
        k: usize,
        rule: Eligibility,
    ) -> Result<RankedDemos> {
        let q = self.embed(query)?;
        let scored = eligible(pool, query, rule).map(|(i, _)| (i, dot(&q, &index.embeddings[i]))).collect();
        top_k(query_id, scored, k)
    }
}

/// Precomputed pool embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndex {
    pub embeddings: Vec<Vec<f64>>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_row(tape: &mut Tape, r: Var) -> Result<Var> {
    let sq = tape.mul(r, r)?;
    let s = tape.sum(sq);
    let s = tape.reshape(s, alloc::vec![1, 1])?;
    let l = tape.log(s)?;
    let l = tape.scale(l, -0.5);
    let inv = tape.exp(l);
    tape.matmul(inv, r)
}

/// Upper-bound ranking by output Jaccard against the query's true future.
pub fn groundtruth_rank(
    query_id: usize,
    query: &EgoSample,
    pool: &[EgoSample],
    k: usize,
    rule: Eligibility,
) -> Result<RankedDemos> {
    let truth = query.y_nodes();
    let scored = eligible(pool, query, rule)
        .map(|(i, c)| (i, set_jaccard(&truth, &c.y_nodes())))
        .collect();
    top_k(query_id, scored, k)
}

/// Pool indices relevant to `query`: output Jaccard at least `threshold`.
pub fn relevant_set(query: &EgoSample, pool: &[EgoSample], threshold: f64) -> BTreeSet<usize> {
    let truth = query.y_nodes();
    pool.iter()
        .enumerate()
        .filter(|(_, c)| set_jaccard(&truth, &c.y_nodes()) >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// 1 if any of the top `k` is relevant; `None` when nothing is relevant.
pub fn hr_at_k(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    Some(if ranked.iter().take(k).any(|c| relevant.contains(c)) { 1.0 } else { 0.0 })
}

/// Mean hit ratio over scored queries, with the count of skipped ones.
pub fn hit_rate(runs: &[(Vec<usize>, BTreeSet<usize>)], k: usize) -> (f64, usize) {
    let hits: Vec<f64> = runs.iter().filter_map(|(r, rel)| hr_at_k(r, rel, k)).collect();
    let skipped = runs.len() - hits.len();
    let rate = if hits.is_empty() { 0.0 } else { hits.iter().sum::<f64>() / hits.len() as f64 };
    (rate, skipped)
}

#[cfg(test)]
mod tests;
