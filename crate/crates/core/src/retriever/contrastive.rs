//! Time-aware and context-aware contrastive objectives and retriever training.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{time_decay, Annotation, Retriever};
use crate::backbone::{SequenceModel, TrainReport, IGNORE};
use crate::error::{invalid, Error, Result};
use crate::numerics::{Adam, AdamConfig, Tape, Var};
use crate::sequencer::{EgoSample, Token, Vocab};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrieverConfig {
    /// Decay rate per raw-time unit.
    pub lambda: f64,
    /// Weight of the context-aware loss.
    pub alpha: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub mask_portion: f64,
    pub crop_portion: f64,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub seed: u64,
    pub use_decay: bool,
    pub use_ccl: bool,
    pub cosine: bool,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            alpha: 1.0,
            tau: 0.1,
            batch_size: 128,
            mask_portion: 0.8,
            crop_portion: 0.4,
            epochs: 20,
            adam: AdamConfig::with_lr(1e-4),
            clip_norm: 1.0,
            seed: 0,
            use_decay: true,
            use_ccl: true,
            cosine: false,
        }
    }
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<()> {
        let portion = 0.0..1.0;
        if !(self.lambda >= 0.0 && self.alpha >= 0.0 && self.tau > 0.0) {
            return Err(invalid("RetrieverConfig", "need lambda >= 0, alpha >= 0, tau > 0"));
        }
        if !portion.contains(&self.mask_portion) || !portion.contains(&self.crop_portion) {
            return Err(invalid("RetrieverConfig", "augmentation portions must lie in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(invalid("RetrieverConfig", "batch size must be at least 2"));
        }
        Ok(())
    }

    /// Decay rate actually applied (0 when decay is switched off).
    pub fn effective_lambda(&self) -> f64 {
        if self.use_decay {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.use_ccl {
            self.alpha
        } else {
            0.0
        }
    }
}

/// InfoNCE over a score matrix: row `i` is scaled by `1 / tau`, column
/// `exclude[i]` is removed, and the target column is `targets[i]`.
pub fn in_batch_nce(tape: &mut Tape, scores: Var, exclude: &[Option<usize>], targets: &[usize], tau: f64) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != exclude.len() || shape[0] != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "in_batch_nce",
            left: shape,
            right: vec![targets.len()],
        });
    }
    let cols = shape[1];
    let scaled = tape.scale(scores, 1.0 / tau);
    if exclude.iter().all(Option::is_none) {
        return tape.cross_entropy(scaled, targets, IGNORE);
    }
    let mut mask = vec![0.0; shape[0] * cols];
    for (i, e) in exclude.iter().enumerate() {
        if let Some(j) = e {
            mask[i * cols + j] = f64::NEG_INFINITY;
        }
    }
    let mask = tape.constant(shape, mask)?;
    let masked = tape.add(scaled, mask)?;
    tape.cross_entropy(masked, targets, IGNORE)
}

fn self_excluded(n: usize) -> (Vec<Option<usize>>, Vec<usize>) {
    ((0..n).map(Some).collect(), (0..n).map(|i| n + i).collect())
}

/// Time-aware loss from precomputed embeddings.
///
/// `times` holds the raw times of the `N` queries followed by their `N`
/// positives. Each query is scored against all `2N` rows except itself with
/// `h = s * mu`, where `mu` is skipped entirely when `lambda == 0`.
pub fn tcl_loss_from_embeddings(
    tape: &mut Tape,
    queries: Var,
    positives: Var,
    times: &[f64],
    lambda: f64,
    tau: f64,
) -> Result<Var> {
    let n = tape.shape(queries)[0];
    if n < 2 {
        return Err(invalid("tcl_loss", "batch needs at least two queries"));
    }
    if times.len() != 2 * n {
        return Err(invalid("tcl_loss", "need one time per batch sequence"));
    }
    let all = tape.concat_rows(&[queries, positives])?;
    let all_t = tape.transpose(all)?;
    let mut h = tape.matmul(queries, all_t)?;
    if lambda > 0.0 {
        let mut mu = Vec::with_capacity(n * 2 * n);
        for i in 0..n {
            for &tj in times {
                mu.push(time_decay(times[i], tj, lambda)?);
            }
        }
        let mu = tape.constant(vec![n, 2 * n], mu)?;
        h = tape.mul(h, mu)?;
    }
    let (exclude, targets) = self_excluded(n);
    in_batch_nce(tape, h, &exclude, &targets, tau)
}

/// Context-aware NT-Xent: anchors are the first views, positives the second
/// views, negatives every other view.
pub fn ccl_loss_from_embeddings(tape: &mut Tape, first: Var, second: Var, tau: f64) -> Result<Var> {
    let n = tape.shape(first)[0];
    if n < 2 {
        return Err(invalid("ccl_loss", "batch needs at least two sequences"));
    }
    let all = tape.concat_rows(&[first, second])?;
    let all_t = tape.transpose(all)?;
    let s = tape.matmul(first, all_t)?;
    let (exclude, targets) = self_excluded(n);
    in_batch_nce(tape, s, &exclude, &targets, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    Mask,
    Crop,
}

/// Masks or crops `round(portion * n)` of the `n` maskable tokens of `x`.
///
/// Maskable tokens are everything between the target node and `[eohist]`.
/// Cropping removes one contiguous run, then drops time tokens whose block
/// became empty.
pub fn augment<R: Rng + ?Sized>(x: &[Token], kind: Augmentation, portion: f64, rng: &mut R) -> Result<Vec<Token>> {
    if !(0.0..1.0).contains(&portion) {
        return Err(invalid("augment", "portion must lie in [0, 1)"));
    }
    let n = x.len().saturating_sub(3);
    if n < 2 {
        return Err(invalid("augment", "fewer than two maskable tokens"));
    }
    let count = libm::round(portion * n as f64) as usize;
    if count == 0 {
        return Ok(x.to_vec());
    }
    if count >= n {
        return Err(invalid("augment", "portion leaves no maskable token"));
    }
    let mut out = x.to_vec();
    match kind {
        Augmentation::Mask => {
            let positions: Vec<usize> = (2..2 + n).collect();
            for &p in positions.choose_multiple(rng, count) {
                out[p] = Token::MASK;
            }
        }
        Augmentation::Crop => {
            let start = 2 + rng.gen_range(0..=n - count);
            out.drain(start..start + count);
            let mut i = 2;
            while i + 1 < out.len() {
                let empty_block = matches!(out[i], Token::Time(_)) && matches!(out[i + 1], Token::Time(_) | Token::EOHIST);
                if empty_block {
                    out.remove(i);
                } else {
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

fn embed_rows(tape: &mut Tape, retriever: &Retriever, seqs: &[Vec<usize>]) -> Result<Var> {
    let rows = seqs.iter().map(|s| retriever.embed_var(tape, s)).collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Time-aware loss for a batch of `(query, positive)` pool samples.
pub fn tcl_loss(
    tape: &mut Tape,
    retriever: &Retriever,
    pairs: &[(&EgoSample, &EgoSample)],
    lambda: f64,
    tau: f64,
) -> Result<Var> {
    let v = &retriever.vocab;
    let q: Vec<Vec<usize>> = pairs.iter().map(|p| v.encode(&p.0.x)).collect::<Result<_>>()?;
    let p: Vec<Vec<usize>> = pairs.iter().map(|p| v.encode(&p.1.x)).collect::<Result<_>>()?;
    if pairs.len() < 2 {
        return Err(invalid("tcl_loss", "batch needs at least two queries"));
    }
    let times: Vec<f64> = pairs.iter().map(|p| p.0.last_time).chain(pairs.iter().map(|p| p.1.last_time)).collect();
    let qe = embed_rows(tape, retriever, &q)?;
    let pe = embed_rows(tape, retriever, &p)?;
    tcl_loss_from_embeddings(tape, qe, pe, &times, lambda, tau)
}

/// Context-aware loss for a batch of pool samples. Sequences too short to
/// augment fall back to the unaugmented view.
pub fn ccl_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    retriever: &Retriever,
    batch: &[&EgoSample],
    mask_portion: f64,
    crop_portion: f64,
    tau: f64,
    rng: &mut R,
) -> Result<Var> {
    if batch.len() < 2 {
        return Err(invalid("ccl_loss", "batch needs at least two sequences"));
    }
    let view = |x: &[Token], kind, portion, rng: &mut R| -> Result<Vec<usize>> {
        let t = augment(x, kind, portion, rng).unwrap_or_else(|_| x.to_vec());
        retriever.vocab.encode(&t)
    };
    let mut first = Vec::with_capacity(batch.len());
    let mut second = Vec::with_capacity(batch.len());
    for s in batch {
        first.push(view(&s.x, Augmentation::Mask, mask_portion, rng)?);
        second.push(view(&s.x, Augmentation::Crop, crop_portion, rng)?);
    }
    let a = embed_rows(tape, retriever, &first)?;
    let b = embed_rows(tape, retriever, &second)?;
    ccl_loss_from_embeddings(tape, a, b, tau)
}

/// Trains the retriever encoder, initialized from `backbone`, on the
/// annotated pool. Each epoch samples one positive per query.
pub fn train_retriever(
    pool: &[EgoSample],
    annotation: &Annotation,
    backbone: &SequenceModel,
    vocab: Vocab,
    config: &RetrieverConfig,
) -> Result<(Retriever, TrainReport)> {
    config.validate()?;
    if annotation.positives.len() != pool.len() {
        return Err(invalid("train_retriever", "annotation does not match the pool"));
    }
    let queries: Vec<usize> = (0..pool.len()).filter(|&i| !annotation.positives[i].is_empty()).collect();
    if queries.is_empty() {
        return Err(Error::NoPositives);
    }
    if queries.len() < 2 {
        return Err(invalid("train_retriever", "need at least two queries with positives"));
    }
    let mut retriever = Retriever {
        model: backbone.clone(),
        vocab,
        cosine: config.cosine,
    };
    let params = retriever.model.encoder_params();
    retriever.model.params.set_trainable(|n| !n.starts_with(crate::backbone::OUTPUT_PREFIX));
    let mut adam = Adam::new(config.adam, &retriever.model.params, params.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lambda = config.effective_lambda();
    let alpha = config.effective_alpha();
    let mut report = TrainReport::default();
    let mut order = queries.clone();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in batches_of(&order, config.batch_size) {
            let pairs: Vec<(&EgoSample, &EgoSample)> = batch
                .iter()
                .map(|&i| {
                    let p = annotation.positives[i][rng.gen_range(0..annotation.positives[i].len())];
                    (&pool[i], &pool[p])
                })
                .collect();
            retriever.model.params.zero_grad();
            let mut tape = Tape::new();
            let mut loss = tcl_loss(&mut tape, &retriever, &pairs, lambda, config.tau)?;
            if alpha > 0.0 {
                let anchors: Vec<&EgoSample> = pairs.iter().map(|p| p.0).collect();
                let c = ccl_loss(&mut tape, &retriever, &anchors, config.mask_portion, config.crop_portion, config.tau, &mut rng)?;
                let c = tape.scale(c, alpha);
                loss = tape.add(loss, c)?;
            }
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { step });
            }
            if epoch == 0 && batches == 0 {
                report.initial_loss = value;
            }
            tape.backward(loss, &mut retriever.model.params)?;
            if config.clip_norm > 0.0 {
                retriever.model.params.clip_grad_norm(&params, config.clip_norm);
            }
            adam.step(&mut retriever.model.params)?;
            total += value;
            batches += 1;
            step += 1;
        }
        report.epoch_losses.push(total / batches as f64);
    }
    retriever.model.params.zero_grad();
    retriever.model.params.set_trainable(|_| true);
    Ok((retriever, report))
}

/// Chunks of `size`, folding a trailing singleton into the previous chunk.
fn batches_of(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}
