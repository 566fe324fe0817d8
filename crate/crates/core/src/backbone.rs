//! Decoder-only transformer over ego sequences.
//!
//! Pre-LayerNorm blocks with causal multi-head attention and a GELU MLP,
//! learned positional embeddings and an untied output projection. Position 0
//! of the positional table is reserved for an optional soft prefix; tokens
//! always start at position 1, so a prefix never shifts their positional
//! embeddings.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::{Adam, AdamConfig, DiffTensor, ParamId, ParamStore, Tape, Var};
use crate::sequencer::{EgoSample, Token, Vocab};

/// Target value that [`Tape::cross_entropy`] skips.
pub const IGNORE: usize = usize::MAX;
/// Parameter-name prefix of the output projection.
pub const OUTPUT_PREFIX: &str = "out.";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    /// Longest token sequence the model accepts.
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl BackboneConfig {
    /// Small default suitable for CPU runs.
    pub fn desk(vocab_size: usize, max_len: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden_dim: 64,
            max_len,
            dropout: 0.0,
            vocab_size,
        }
    }

    /// Named (layers, heads, hidden) size presets per dataset.
    pub fn preset(name: &str, vocab_size: usize, max_len: usize) -> Option<Self> {
        let (layers, heads, hidden_dim) = match name {
            "uci" => (6, 8, 768),
            "hepth" => (12, 2, 256),
            "mmconv" => (2, 2, 256),
            "wikipedia" | "enron" => (2, 6, 768),
            "reddit" => (2, 8, 512),
            _ => return None,
        };
        Some(Self {
            layers,
            heads,
            hidden_dim,
            max_len,
            dropout: 0.0,
            vocab_size,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(invalid("BackboneConfig", "hidden_dim must be divisible by heads"));
        }
        if self.layers == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(invalid("BackboneConfig", "layers, max_len and vocab_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("BackboneConfig", "dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Layout {
    fn resolve(store: &ParamStore, layers: usize) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| {
                let p = |n: &str| store.require(&format!("block{i}.{n}"));
                Ok(BlockIds {
                    ln1_g: p("ln1.g")?,
                    ln1_b: p("ln1.b")?,
                    wq: p("attn.wq")?,
                    wk: p("attn.wk")?,
                    wv: p("attn.wv")?,
                    wo: p("attn.wo")?,
                    bo: p("attn.bo")?,
                    ln2_g: p("ln2.g")?,
                    ln2_b: p("ln2.b")?,
                    w1: p("mlp.w1")?,
                    b1: p("mlp.b1")?,
                    w2: p("mlp.w2")?,
                    b2: p("mlp.b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok_emb: store.require("tok_emb")?,
            pos_emb: store.require("pos_emb")?,
            blocks,
            lnf_g: store.require("lnf.g")?,
            lnf_b: store.require("lnf.b")?,
            out_w: store.require("out.w")?,
            out_b: store.require("out.b")?,
        })
    }
}

/// The sequence encoder `f` plus its output projection.
#[derive(Debug, Clone)]
pub struct SequenceModel {
    pub config: BackboneConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl PartialEq for SequenceModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl SequenceModel {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let mut s = ParamStore::new();
        s.insert("tok_emb", DiffTensor::uniform(vec![config.vocab_size, d], 0.1, &mut rng));
        s.insert("pos_emb", DiffTensor::uniform(vec![config.max_len + 1, d], 0.1, &mut rng));
        for i in 0..config.layers {
            let n = |x: &str| format!("block{i}.{x}");
            s.insert(n("ln1.g"), DiffTensor::filled(vec![d], 1.0));
            s.insert(n("ln1.b"), DiffTensor::zeros(vec![d]));
            s.insert(n("attn.wq"), DiffTensor::xavier(d, d, &mut rng));
            s.insert(n("attn.wk"), DiffTensor::xavier(d, d, &mut rng));
            s.insert(n("attn.wv"), DiffTensor::xavier(d, d, &mut rng));
            s.insert(n("attn.wo"), DiffTensor::xavier(d, d, &mut rng));
            s.insert(n("attn.bo"), DiffTensor::zeros(vec![d]));
            s.insert(n("ln2.g"), DiffTensor::filled(vec![d], 1.0));
            s.insert(n("ln2.b"), DiffTensor::zeros(vec![d]));
            s.insert(n("mlp.w1"), DiffTensor::xavier(d, 4 * d, &mut rng));
            s.insert(n("mlp.b1"), DiffTensor::zeros(vec![4 * d]));
            s.insert(n("mlp.w2"), DiffTensor::xavier(4 * d, d, &mut rng));
            s.insert(n("mlp.b2"), DiffTensor::zeros(vec![d]));
        }
        s.insert("lnf.g", DiffTensor::filled(vec![d], 1.0));
        s.insert("lnf.b", DiffTensor::zeros(vec![d]));
        s.insert("out.w", DiffTensor::xavier(d, config.vocab_size, &mut rng));
        s.insert("out.b", DiffTensor::zeros(vec![config.vocab_size]));
        Self::from_params(config, s)
    }

    /// Rebuilds a model around a loaded parameter store.
    pub fn from_params(config: BackboneConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&params, config.layers)?;
        let emb = params.get(layout.tok_emb).shape();
        if emb != [config.vocab_size, config.hidden_dim] {
            return Err(Error::ShapeMismatch {
                op: "SequenceModel::from_params",
                left: emb.to_vec(),
                right: vec![config.vocab_size, config.hidden_dim],
            });
        }
        Ok(Self { config, params, layout })
    }

    pub fn token_embedding(&self) -> ParamId {
        self.layout.tok_emb
    }

    /// Ids of every parameter except the output projection.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let n = self.params.name(id);
                !n.starts_with(OUTPUT_PREFIX) && self.is_backbone_param(n)
            })
            .collect()
    }

    /// Ids of every backbone parameter (encoder plus output projection).
    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.is_backbone_param(self.params.name(id))).collect()
    }

    fn is_backbone_param(&self, name: &str) -> bool {
        name == "tok_emb"
            || name == "pos_emb"
            || name.starts_with("block")
            || name.starts_with("lnf.")
            || name.starts_with(OUTPUT_PREFIX)
    }

    /// Final hidden states for `prefix` rows (if any) followed by `ids`.
    ///
    /// `dropout_rng` enables dropout with the configured rate.
    pub fn hidden(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        prefix: Option<Var>,
        prefix_positional: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if ids.len() > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: cfg.max_len,
            });
        }
        if ids.is_empty() && prefix.is_none() {
            return Err(invalid("hidden", "empty input"));
        }
        let d = cfg.hidden_dim;
        let tok = tape.param(&self.params, self.layout.tok_emb);
        let pos = tape.param(&self.params, self.layout.pos_emb);
        let mut parts = Vec::new();
        if let Some(p) = prefix {
            if tape.shape(p).len() != 2 || tape.shape(p)[1] != d {
                return Err(Error::ShapeMismatch {
                    op: "hidden(prefix)",
                    left: tape.shape(p).to_vec(),
                    right: vec![1, d],
                });
            }
            let m = tape.shape(p)[0];
            let p = if prefix_positional {
                let p0 = tape.gather_rows(pos, &vec![0; m])?;
                tape.add(p, p0)?
            } else {
                p
            };
            parts.push(p);
        }
        if !ids.is_empty() {
            let e = tape.gather_rows(tok, ids)?;
            let positions: Vec<usize> = (1..=ids.len()).collect();
            let pe = tape.gather_rows(pos, &positions)?;
            parts.push(tape.add(e, pe)?);
        }
        let mut h = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let n = tape.shape(h)[0];
        let mask = causal_mask(tape, n)?;
        for b in &self.layout.blocks {
            let a = self.layer_norm(tape, h, b.ln1_g, b.ln1_b)?;
            let att = self.attention(tape, a, b, mask)?;
            let att = dropout(tape, att, cfg.dropout, dropout_rng.as_deref_mut())?;
            h = tape.add(h, att)?;
            let a2 = self.layer_norm(tape, h, b.ln2_g, b.ln2_b)?;
            let w1 = tape.param(&self.params, b.w1);
            let b1 = tape.param(&self.params, b.b1);
            let w2 = tape.param(&self.params, b.w2);
            let b2 = tape.param(&self.params, b.b2);
            let f = tape.matmul(a2, w1)?;
            let f = tape.add_row(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, b2)?;
            let f = dropout(tape, f, cfg.dropout, dropout_rng.as_deref_mut())?;
            h = tape.add(h, f)?;
        }
        self.layer_norm(tape, h, self.layout.lnf_g, self.layout.lnf_b)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, g: ParamId, b: ParamId) -> Result<Var> {
        let n = tape.layer_norm_rows(x, LN_EPS);
        let g = tape.param(&self.params, g);
        let b = tape.param(&self.params, b);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }

    fn attention(&self, tape: &mut Tape, a: Var, b: &BlockIds, mask: Var) -> Result<Var> {
        let d = self.config.hidden_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let wq = tape.param(&self.params, b.wq);
        let wk = tape.param(&self.params, b.wk);
        let wv = tape.param(&self.params, b.wv);
        let q = tape.matmul(a, wq)?;
        let k = tape.matmul(a, wk)?;
        let v = tape.matmul(a, wv)?;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let sc = tape.matmul(qh, kt)?;
            let sc = tape.scale(sc, scale);
            let sc = tape.add(sc, mask)?;
            let p = tape.softmax_rows(sc)?;
            outs.push(tape.matmul(p, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let wo = tape.param(&self.params, b.wo);
        let bo = tape.param(&self.params, b.bo);
        let o = tape.matmul(o, wo)?;
        tape.add_row(o, bo)
    }

    /// Vocabulary logits for every row of `hidden`.
    pub fn logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let w = tape.param(&self.params, self.layout.out_w);
        let b = tape.param(&self.params, self.layout.out_b);
        let l = tape.matmul(hidden, w)?;
        tape.add_row(l, b)
    }

    /// Hidden-state matrix (`len x hidden_dim`, row-major) of a token sequence.
    pub fn encode(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let h = self.hidden(&mut tape, ids, None, true, None)?;
        Ok(tape.value(h).to_vec())
    }

    /// Mean of the hidden states over non-pad positions, as a `1 x d` node.
    pub fn represent_var(&self, tape: &mut Tape, ids: &[usize], pad: usize) -> Result<Var> {
        let mask: Vec<f64> = ids.iter().map(|&i| if i == pad { 0.0 } else { 1.0 }).collect();
        if !mask.iter().any(|&m| m != 0.0) {
            return Err(invalid("represent", "sequence contains only padding"));
        }
        let h = self.hidden(tape, ids, None, true, None)?;
        tape.masked_mean_rows(h, &mask)
    }

    /// Sequence representation `f(x)`.
    pub fn represent(&self, ids: &[usize], pad: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let r = self.represent_var(&mut tape, ids, pad)?;
        Ok(tape.value(r).to_vec())
    }

    /// Next-token loss of `y` given `x` (teacher forcing), with optional
    /// prefix rows. Only positions that predict a `y` token are scored.
    pub fn lm_loss(
        &self,
        tape: &mut Tape,
        x: &[usize],
        y: &[usize],
        prefix: Option<Var>,
        prefix_positional: bool,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (input, targets) = lm_targets(x, y)?;
        let h = self.hidden(tape, &input, prefix, prefix_positional, dropout_rng)?;
        let m = prefix.map(|p| tape.shape(p)[0]).unwrap_or(0);
        let h = if m > 0 { tape.slice_rows(h, m, input.len())? } else { h };
        let logits = self.logits(tape, h)?;
        tape.cross_entropy(logits, &targets, IGNORE)
    }

    /// Greedy decoding after `x`: emits `[pred] [time_k]`, then argmax tokens
    /// until `[eopred]`, `max_new` generated tokens, or the length limit.
    pub fn generate(&self, vocab: &Vocab, x: &[Token], prediction_step: usize, max_new: usize, prefix: Option<&[f64]>) -> Result<Vec<Token>> {
        self.generate_ids(vocab, &vocab.encode(x)?, prediction_step, max_new, prefix, true)
    }

    pub fn generate_ids(
        &self,
        vocab: &Vocab,
        x: &[usize],
        prediction_step: usize,
        max_new: usize,
        prefix: Option<&[f64]>,
        prefix_positional: bool,
    ) -> Result<Vec<Token>> {
        let forced = [vocab.index(Token::PRED)?, vocab.index(Token::Time(prediction_step))?];
        let eopred = vocab.index(Token::EOPRED)?;
        let mut seq = x.to_vec();
        let mut out = Vec::new();
        for &f in forced.iter().take(max_new) {
            seq.push(f);
            out.push(f);
        }
        let d = self.config.hidden_dim;
        while out.len() < max_new && seq.len() < self.config.max_len && out.last() != Some(&eopred) {
            let mut tape = Tape::new();
            let pv = match prefix {
                Some(p) => Some(tape.constant(vec![p.len() / d, d], p.to_vec())?),
                None => None,
            };
            let h = self.hidden(&mut tape, &seq, pv, prefix_positional, None)?;
            let n = tape.shape(h)[0];
            let last = tape.slice_rows(h, n - 1, 1)?;
            let logits = self.logits(&mut tape, last)?;
            let next = argmax(tape.value(logits));
            seq.push(next);
            out.push(next);
        }
        vocab.decode(&out)
    }
}

/// Splits `x ‖ y` into model input and shifted targets; only positions that
/// predict a `y` token carry a target.
pub fn lm_targets(x: &[usize], y: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if y.is_empty() {
        return Err(invalid("lm_targets", "empty target span"));
    }
    let mut seq = x.to_vec();
    seq.extend_from_slice(y);
    let input = seq[..seq.len() - 1].to_vec();
    let targets = (0..input.len())
        .map(|i| if i + 1 >= x.len() { seq[i + 1] } else { IGNORE })
        .collect();
    Ok((input, targets))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn causal_mask(tape: &mut Tape, n: usize) -> Result<Var> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = f64::NEG_INFINITY;
        }
    }
    tape.constant(vec![n, n], m)
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..tape.value(x).len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(tape.shape(x).to_vec(), mask)?;
    tape.mul(x, m)
}

/// Ranked prediction list: distinct node tokens in order of first appearance.
pub fn ranked_nodes(generated: &[Token]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for n in generated.iter().filter_map(|t| t.node()) {
        if !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for LmTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            adam: AdamConfig::with_lr(3e-3),
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Loss trajectory of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean loss over the whole pool before the first update.
    pub initial_loss: f64,
    /// Mean per-batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Encoded `(x, y)` pairs ready for the model.
pub fn encode_samples(vocab: &Vocab, samples: &[EgoSample]) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    samples.iter().map(|s| Ok((vocab.encode(&s.x)?, vocab.encode(&s.y)?))).collect()
}

/// Mean LM loss of `model` over `data` without updating it.
pub fn mean_lm_loss(model: &SequenceModel, data: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in data {
        let mut tape = Tape::new();
        let l = model.lm_loss(&mut tape, x, y, None, true, None)?;
        total += tape.scalar(l);
    }
    Ok(total / data.len().max(1) as f64)
}

/// Pre-trains the backbone on the retrieval pool with next-token loss on `y`.
pub fn train_lm(
    pool: &[EgoSample],
    vocab: &Vocab,
    config: BackboneConfig,
    opts: &LmTrainOptions,
) -> Result<(SequenceModel, TrainReport)> {
    if pool.is_empty() {
        return Err(Error::EmptyInput);
    }
    let data = encode_samples(vocab, pool)?;
    let mut model = SequenceModel::new(config, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_1a2b);
    let params = model.backbone_params();
    let mut adam = Adam::new(opts.adam, &model.params, params.clone());
    let mut report = TrainReport {
        initial_loss: mean_lm_loss(&model, &data)?,
        epoch_losses: Vec::new(),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            model.params.zero_grad();
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (x, y) = &data[i];
                losses.push(model.lm_loss(&mut tape, x, y, None, true, Some(&mut rng))?);
            }
            let stacked = tape.concat_rows(&losses)?;
            let loss = tape.mean(stacked);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { step });
            }
            tape.backward(loss, &mut model.params)?;
            if opts.clip_norm > 0.0 {
                model.params.clip_grad_norm(&params, opts.clip_norm);
            }
            adam.step(&mut model.params)?;
            epoch_total += value;
            batches += 1;
            step += 1;
        }
        report.epoch_losses.push(epoch_total / batches as f64);
    }
    model.params.zero_grad();
    Ok((model, report))
}
