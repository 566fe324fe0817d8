//! Demonstration fusion and the retrieval-augmented generator.
//!
//! Three strategies share one fine-tuning loop:
//! * `Graph`: demos become a summary graph whose one-layer GCN readout is a
//!   single soft prefix vector.
//! * `Mlp`: concatenated demo representations map to `m` prefix vectors.
//! * `Concat`: demo tokens are placed in front of the query tokens.
//!
//! In every case the backbone is frozen except its output projection.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ranked_nodes, SequenceModel, TrainReport, OUTPUT_PREFIX};
use crate::error::{invalid, Error, Result};
use crate::numerics::{Adam, AdamConfig, DiffTensor, ParamId, Tape, Var};
use crate::sequencer::{EgoSample, Token, Vocab};

/// Parameter-name prefix of every fusion parameter.
pub const FUSION_PREFIX: &str = "fusion.";

/// Token graph merging a set of demonstrations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryGraph {
    /// Vocabulary ids, ascending; node `i` is `nodes[i]`.
    pub nodes: Vec<usize>,
    /// Undirected edges `(i, j)` with `i < j`, excluding self-loops.
    pub edges: BTreeSet<(usize, usize)>,
}

impl SummaryGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Dense `D^{-1/2} (A + I) D^{-1/2}`, row-major.
    pub fn normalized_adjacency(&self) -> Vec<f64> {
        let n = self.nodes.len();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        for &(i, j) in &self.edges {
            a[i * n + j] = 1.0;
            a[j * n + i] = 1.0;
        }
        let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] /= libm::sqrt(deg[i] * deg[j]);
            }
        }
        a
    }
}

/// Joins consecutive tokens of each demo; repeated tokens share a node.
pub fn build_summary_graph(demos: &[Vec<usize>]) -> Result<SummaryGraph> {
    if demos.is_empty() || demos.iter().all(Vec::is_empty) {
        return Err(Error::EmptyCandidates);
    }
    let nodes: Vec<usize> = demos.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let pos: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let mut edges = BTreeSet::new();
    for d in demos {
        for w in d.windows(2) {
            let (a, b) = (pos[&w[0]], pos[&w[1]]);
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    Ok(SummaryGraph { nodes, edges })
}

/// `mean_rows(ReLU(Â X W))` where `X` gathers the graph's token rows from
/// `embeddings`.
pub fn gcn_readout(tape: &mut Tape, graph: &SummaryGraph, embeddings: Var, weight: Var) -> Result<Var> {
    let n = graph.node_count();
    if n == 0 {
        return Err(Error::EmptyCandidates);
    }
    let x = tape.gather_rows(embeddings, &graph.nodes)?;
    let adj = tape.constant(vec![n, n], graph.normalized_adjacency())?;
    let ax = tape.matmul(adj, x)?;
    let h = tape.matmul(ax, weight)?;
    let h = tape.relu(h);
    tape.masked_mean_rows(h, &vec![1.0; n])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Graph,
    Concat,
    Mlp,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Graph, Strategy::Concat, Strategy::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Graph => "graph",
            Strategy::Concat => "concat",
            Strategy::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid("Strategy::parse", alloc::format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// Demonstrations per query.
    pub k: usize,
    /// Prefix vectors produced by the MLP strategy.
    pub prefix_len: usize,
    /// Put demo outputs `y_k` into the summary graph alongside `x_k`.
    pub include_outputs: bool,
    /// Add the position-0 embedding to prefix vectors.
    pub prefix_positional: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub max_new: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Graph,
            k: 7,
            prefix_len: 15,
            include_outputs: true,
            prefix_positional: true,
            epochs: 40,
            batch_size: 8,
            adam: AdamConfig::with_lr(1e-2),
            clip_norm: 1.0,
            max_new: 24,
            seed: 0,
        }
    }
}

/// Backbone plus fusion parameters, sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub model: SequenceModel,
    pub vocab: Vocab,
    pub config: FusionConfig,
}

impl Generator {
    /// Adds freshly initialized fusion parameters to a copy of `backbone`.
    pub fn new(backbone: &SequenceModel, vocab: Vocab, config: FusionConfig) -> Result<Self> {
        let mut model = backbone.clone();
        let d = model.config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xf05e);
        match config.strategy {
            Strategy::Graph => {
                model.params.insert("fusion.gcn.w", DiffTensor::xavier(d, d, &mut rng));
            }
            Strategy::Mlp => {
                if config.k == 0 || config.prefix_len == 0 {
                    return Err(invalid("Generator::new", "mlp fusion needs k and prefix_len >= 1"));
                }
                let m = config.prefix_len;
                model.params.insert("fusion.mlp.w1", DiffTensor::xavier(config.k * d, d, &mut rng));
                model.params.insert("fusion.mlp.b1", DiffTensor::zeros(vec![d]));
                model.params.insert("fusion.mlp.w2", DiffTensor::xavier(d, m * d, &mut rng));
                model.params.insert("fusion.mlp.b2", DiffTensor::zeros(vec![m * d]));
            }
            Strategy::Concat => {}
        }
        Ok(Self { model, vocab, config })
    }

    /// Ids of the parameters fine-tuning may change.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let p = &self.model.params;
        p.ids()
            .filter(|&id| {
                let n = p.name(id);
                n.starts_with(OUTPUT_PREFIX) || n.starts_with(FUSION_PREFIX)
            })
            .collect()
    }

    fn demo_tokens(&self, demo: &EgoSample, with_outputs: bool) -> Result<Vec<usize>> {
        if with_outputs {
            self.vocab.encode(&demo.full())
        } else {
            self.vocab.encode(&demo.x)
        }
    }

    /// Frozen backbone representation of a demo `x_k ‖ y_k`.
    pub fn demo_representation(&self, demo: &EgoSample) -> Result<Vec<f64>> {
        let ids = self.demo_tokens(demo, true)?;
        let ids = &ids[..ids.len().min(self.model.config.max_len)];
        self.model.represent(ids, self.vocab.pad_index())
    }

    /// Soft prefix rows for `demos`, or `None` when no prefix applies.
    fn prefix(&self, tape: &mut Tape, demos: &[&EgoSample], reps: Option<&[&[f64]]>) -> Result<Option<Var>> {
        if demos.is_empty() {
            return Ok(None);
        }
        let p = &self.model.params;
        match self.config.strategy {
            Strategy::Concat => Ok(None),
            Strategy::Graph => {
                let seqs = demos
                    .iter()
                    .map(|d| self.demo_tokens(d, self.config.include_outputs))
                    .collect::<Result<Vec<_>>>()?;
                let g = build_summary_graph(&seqs)?;
                let emb = tape.param(p, self.model.token_embedding());
                let w = tape.param(p, p.require("fusion.gcn.w")?);
                Ok(Some(gcn_readout(tape, &g, emb, w)?))
            }
            Strategy::Mlp => {
                let d = self.model.config.hidden_dim;
                let k = self.config.k;
                let mut z = vec![0.0; k * d];
                for (slot, demo) in demos.iter().take(k).enumerate() {
                    let r = match reps {
                        Some(r) => r[slot].to_vec(),
                        None => self.demo_representation(demo)?,
                    };
                    z[slot * d..(slot + 1) * d].copy_from_slice(&r);
                }
                let z = tape.constant(vec![1, k * d], z)?;
                let w1 = tape.param(p, p.require("fusion.mlp.w1")?);
                let b1 = tape.param(p, p.require("fusion.mlp.b1")?);
                let w2 = tape.param(p, p.require("fusion.mlp.w2")?);
                let b2 = tape.param(p, p.require("fusion.mlp.b2")?);
                let h = tape.matmul(z, w1)?;
                let h = tape.add_row(h, b1)?;
                let h = tape.relu(h);
                let o = tape.matmul(h, w2)?;
                let o = tape.add_row(o, b2)?;
                Ok(Some(tape.reshape(o, vec![self.config.prefix_len, d])?))
            }
        }
    }

    /// Model input ids: the query `x`, preceded by demo tokens for the concat
    /// strategy. Demos are laid out so the best one sits next to the query;
    /// the lowest-ranked are dropped first to respect `budget`. Returns the
    /// ids and whether any demo was dropped.
    fn input_ids(&self, query: &EgoSample, demos: &[&EgoSample], budget: usize) -> Result<(Vec<usize>, bool)> {
        let x = self.vocab.encode(&query.x)?;
        if self.config.strategy != Strategy::Concat || demos.is_empty() {
            return Ok((x, false));
        }
        let mut blocks = demos.iter().map(|d| self.vocab.encode(&d.full())).collect::<Result<Vec<_>>>()?;
        let mut dropped = false;
        while !blocks.is_empty() && blocks.iter().map(Vec::len).sum::<usize>() + x.len() > budget {
            blocks.pop();
            dropped = true;
        }
        let mut ids: Vec<usize> = blocks.into_iter().rev().flatten().collect();
        ids.extend(x);
        Ok((ids, dropped))
    }

    /// Next-token loss on `query.y` with the demos fused in.
    pub fn loss(&self, tape: &mut Tape, query: &EgoSample, demos: &[&EgoSample]) -> Result<(Var, bool)> {
        self.loss_with(tape, query, demos, None)
    }

    fn loss_with(&self, tape: &mut Tape, query: &EgoSample, demos: &[&EgoSample], reps: Option<&[&[f64]]>) -> Result<(Var, bool)> {
        let y = self.vocab.encode(&query.y)?;
        let budget = self.model.config.max_len + 1 - y.len().min(self.model.config.max_len);
        let (x, dropped) = self.input_ids(query, demos, budget)?;
        let prefix = self.prefix(tape, demos, reps)?;
        let l = self.model.lm_loss(tape, &x, &y, prefix, self.config.prefix_positional, None)?;
        Ok((l, dropped))
    }

    /// Greedy generation for `query` with `demos` fused in; returns the
    /// generated tokens. No demos means the plain backbone path.
    pub fn generate(&self, query: &EgoSample, demos: &[&EgoSample]) -> Result<Vec<Token>> {
        let budget = self.model.config.max_len.saturating_sub(self.config.max_new);
        let (x, _) = self.input_ids(query, demos, budget)?;
        let mut tape = Tape::new();
        let prefix = self.prefix(&mut tape, demos, None)?.map(|p| tape.value(p).to_vec());
        self.model.generate_ids(
            &self.vocab,
            &x,
            query.prediction_step,
            self.config.max_new,
            prefix.as_deref(),
            self.config.prefix_positional,
        )
    }

    /// Ranked node predictions for `query` using the first `k` of `demos`.
    pub fn predict(&self, query: &EgoSample, demos: &[&EgoSample], k: usize) -> Result<Vec<usize>> {
        let demos = &demos[..k.min(demos.len())];
        Ok(ranked_nodes(&self.generate(query, demos)?))
    }
}

/// Outcome counters of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinetuneReport {
    pub losses: TrainReport,
    /// Samples whose concatenated demos had to be shortened.
    pub truncated: usize,
}

/// Fine-tunes fusion parameters and the output projection on the pool.
/// `demos[i]` lists pool indices retrieved for pool sample `i`, best first.
pub fn finetune_generator(
    pool: &[EgoSample],
    demos: &[Vec<usize>],
    backbone: &SequenceModel,
    vocab: Vocab,
    config: FusionConfig,
) -> Result<(Generator, FinetuneReport)> {
    if pool.is_empty() {
        return Err(Error::EmptyInput);
    }
    if demos.len() != pool.len() {
        return Err(invalid("finetune_generator", "need one demo list per pool sample"));
    }
    let mut gen = Generator::new(backbone, vocab, config)?;
    let trainable = gen.trainable_ids();
    gen.model.params.set_trainable(|n| n.starts_with(OUTPUT_PREFIX) || n.starts_with(FUSION_PREFIX));
    let reps: Vec<Vec<f64>> = if config.strategy == Strategy::Mlp {
        pool.iter().map(|s| gen.demo_representation(s)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut adam = Adam::new(config.adam, &gen.model.params, trainable.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut report = FinetuneReport::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size.max(1)) {
            gen.model.params.zero_grad();
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let ids: Vec<usize> = demos[i].iter().take(config.k).copied().collect();
                let ds: Vec<&EgoSample> = ids.iter().map(|&j| &pool[j]).collect();
                let rs: Vec<&[f64]> = ids.iter().filter_map(|&j| reps.get(j).map(Vec::as_slice)).collect();
                let (l, dropped) = gen.loss_with(&mut tape, &pool[i], &ds, (!rs.is_empty()).then_some(&rs[..]))?;
                if dropped && epoch == 0 {
                    report.truncated += 1;
                }
                losses.push(l);
            }
            let stacked = tape.concat_rows(&losses)?;
            let loss = tape.mean(stacked);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { step });
            }
            if epoch == 0 && batches == 0 {
                report.losses.initial_loss = value;
            }
            tape.backward(loss, &mut gen.model.params)?;
            if config.clip_norm > 0.0 {
                gen.model.params.clip_grad_norm(&trainable, config.clip_norm);
            }
            adam.step(&mut gen.model.params)?;
            total += value;
            batches += 1;
            step += 1;
        }
        report.losses.epoch_losses.push(total / batches as f64);
    }
    gen.model.params.zero_grad();
    gen.model.params.set_trainable(|_| true);
    Ok((gen, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::numerics::grad_check;

    #[test]
    fn summary_graph_counting() {
        let g = build_summary_graph(&[vec![1, 2, 3, 4, 5]]).unwrap();
        assert_eq!((g.node_count(), g.edges.len()), (5, 4));
        let twice = build_summary_graph(&[vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5]]).unwrap();
        assert_eq!(g, twice);
        let shared = build_summary_graph(&[vec![1, 2, 3], vec![1, 7, 8, 9]]).unwrap();
        assert_eq!(shared.node_count(), 3 + 4 - 1);
        let swapped = build_summary_graph(&[vec![1, 7, 8, 9], vec![1, 2, 3]]).unwrap();
        assert_eq!(shared, swapped);
        assert!(build_summary_graph(&[]).is_err());
    }

    #[test]
    fn readout_matches_hand_computation() {
        // Path 10 - 11 - 12; degrees with self-loops 2, 3, 2.
        let g = build_summary_graph(&[vec![10, 11, 12]]).unwrap();
        let x = [[1.0, -2.0], [0.5, 1.0], [-1.0, 3.0]];
        let w = [[2.0, 0.0], [1.0, -1.0]];
        let mut table = vec![0.0; 13 * 2];
        for (i, row) in x.iter().enumerate() {
            table[(10 + i) * 2..(10 + i) * 2 + 2].copy_from_slice(row);
        }
        let mut tape = Tape::new();
        let emb = tape.constant(vec![13, 2], table).unwrap();
        let wv = tape.constant(vec![2, 2], w.concat()).unwrap();
        let e = gcn_readout(&mut tape, &g, emb, wv).unwrap();

        let s6 = 1.0 / 6f64.sqrt();
        let a = [[0.5, s6, 0.0], [s6, 1.0 / 3.0, s6], [0.0, s6, 0.5]];
        let mut expected = [0.0; 2];
        for i in 0..3 {
            for c in 0..2 {
                let mut v = 0.0;
                for j in 0..3 {
                    for k in 0..2 {
                        v += a[i][j] * x[j][k] * w[k][c];
                    }
                }
                expected[c] += v.max(0.0) / 3.0;
            }
        }
        for c in 0..2 {
            assert!((tape.value(e)[c] - expected[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn single_node_readout_is_relu_xw() {
        let g = build_summary_graph(&[vec![1]]).unwrap();
        let mut tape = Tape::new();
        let emb = tape.constant(vec![2, 2], vec![0.0, 0.0, 1.0, -1.0]).unwrap();
        let w = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 1.0]).unwrap();
        let e = gcn_readout(&mut tape, &g, emb, w).unwrap();
        assert_eq!(tape.value(e), &[0.0, 1.0]);
    }

    fn toy() -> (Vec<EgoSample>, Vocab, SequenceModel) {
        let vocab = Vocab::new(4, 10);
        let pool: Vec<EgoSample> = (0..6)
            .map(|i| EgoSample {
                target: i,
                x: vec![Token::HIST, Token::Node(i), Token::Time(1), Token::Node((i + 3) % 10), Token::EOHIST],
                y: vec![Token::PRED, Token::Time(2), Token::Node((i + 5) % 10), Token::EOPRED],
                last_step: 1,
                last_time: 1.0,
                prediction_step: 2,
            })
            .collect();
        let cfg = BackboneConfig {
            layers: 1,
            heads: 2,
            hidden_dim: 8,
            max_len: 40,
            dropout: 0.0,
            vocab_size: vocab.len(),
        };
        (pool, vocab, SequenceModel::new(cfg, 1).unwrap())
    }

    #[test]
    fn freeze_contract_and_descent() {
        let (pool, vocab, backbone) = toy();
        let demos: Vec<Vec<usize>> = (0..6).map(|i| vec![(i + 1) % 6, (i + 2) % 6]).collect();
        for strategy in Strategy::ALL {
            let cfg = FusionConfig {
                strategy,
                k: 2,
                prefix_len: 3,
                epochs: 15,
                batch_size: 3,
                adam: AdamConfig::with_lr(1e-2),
                ..FusionConfig::default()
            };
            let (gen, report) = finetune_generator(&pool, &demos, &backbone, vocab, cfg).unwrap();
            for (name, t) in backbone.params.iter() {
                let after = gen.model.params.get(gen.model.params.require(name).unwrap());
                if name.starts_with(OUTPUT_PREFIX) {
                    assert_ne!(after.data(), t.data(), "{name} should move");
                } else {
                    assert_eq!(after.data(), t.data(), "{name} must stay frozen");
                }
            }
            assert!(report.losses.final_loss() < report.losses.initial_loss, "{strategy:?}");
            let q = &pool[0];
            let ds = [&pool[1], &pool[2]];
            assert_eq!(gen.predict(q, &ds, 2).unwrap(), gen.predict(q, &ds, 2).unwrap());
        }
    }

    #[test]
    fn k_zero_is_plain_backbone() {
        let (pool, vocab, backbone) = toy();
        let gen = Generator::new(&backbone, vocab, FusionConfig::default()).unwrap();
        let plain = backbone.generate(&vocab, &pool[0].x, 2, 24, None).unwrap();
        assert_eq!(gen.generate(&pool[0], &[]).unwrap(), plain);
        assert_eq!(gen.predict(&pool[0], &[&pool[1]], 0).unwrap(), ranked_nodes(&plain));
    }

    #[test]
    fn prefix_changes_logits() {
        let (pool, vocab, backbone) = toy();
        let gen = Generator::new(&backbone, vocab, FusionConfig::default()).unwrap();
        let x = vocab.encode(&pool[0].x).unwrap();
        let logits = |p: Option<Vec<f64>>| {
            let mut tape = Tape::new();
            let pv = p.map(|v| tape.constant(vec![1, 8], v).unwrap());
            let h = gen.model.hidden(&mut tape, &x, pv, true, None).unwrap();
            let n = tape.shape(h)[0];
            let last = tape.slice_rows(h, n - 1, 1).unwrap();
            let l = gen.model.logits(&mut tape, last).unwrap();
            tape.value(l).to_vec()
        };
        let a = logits(Some(vec![0.5; 8]));
        let b = logits(Some(vec![-0.5; 8]));
        assert!(a.iter().zip(&b).any(|(u, v)| u != v));
    }

    #[test]
    fn concat_drops_lowest_ranked_first() {
        let (pool, vocab, backbone) = toy();
        let gen = Generator::new(&backbone, vocab, FusionConfig { strategy: Strategy::Concat, ..FusionConfig::default() }).unwrap();
        let ds = [&pool[1], &pool[2], &pool[3]];
        let (ids, dropped) = gen.input_ids(&pool[0], &ds, 5 + 9 + 9).unwrap();
        assert!(dropped);
        let mut expected = vocab.encode(&pool[2].full()).unwrap();
        expected.extend(vocab.encode(&pool[1].full()).unwrap());
        expected.extend(vocab.encode(&pool[0].x).unwrap());
        assert_eq!(ids, expected);
        let (_, dropped) = gen.input_ids(&pool[0], &ds, 100).unwrap();
        assert!(!dropped);
    }

    #[test]
    fn gcn_weight_gradient_check() {
        let (pool, vocab, backbone) = toy();
        let mut gen = Generator::new(&backbone, vocab, FusionConfig::default()).unwrap();
        gen.model.params.set_trainable(|n| n.starts_with(FUSION_PREFIX));
        let snapshot = gen.clone();
        let mut store = gen.model.params.clone();
        let err = grad_check(&mut store, 1e-5, |tape, s| {
            let mut g = snapshot.clone();
            g.model.params = s.clone();
            g.loss(tape, &pool[0], &[&pool[1], &pool[2]]).map(|r| r.0)
        })
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}
