use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{BackboneConfig, SequenceModel};
use crate::graphdata::{split, synth_graph, SplitSpec, SynthParams};
use crate::numerics::{grad_check, DiffTensor, ParamStore, Tape};
use crate::sequencer::{build_pool, build_vocab, Token};

fn sample(target: usize, hist: &[(usize, &[usize])], y: &[usize], last_time: f64) -> EgoSample {
    let mut x = vec![Token::HIST, Token::Node(target)];
    let mut last_step = 0;
    for (step, nodes) in hist {
        x.push(Token::Time(*step));
        x.extend(nodes.iter().map(|&n| Token::Node(n)));
        last_step = *step;
    }
    x.push(Token::EOHIST);
    let pred = last_step + 1;
    let mut yt = vec![Token::PRED, Token::Time(pred)];
    yt.extend(y.iter().map(|&n| Token::Node(n)));
    yt.push(Token::EOPRED);
    EgoSample {
        target,
        x,
        y: yt,
        last_step,
        last_time,
        prediction_step: pred,
    }
}

#[test]
fn output_jaccard_examples() {
    let a = sample(0, &[(1, &[1])], &[5, 7], 1.0);
    let b = sample(0, &[(1, &[1])], &[7, 9], 1.0);
    let c = sample(0, &[(1, &[1])], &[1, 2], 1.0);
    assert!((output_jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(output_jaccard(&a, &a), 1.0);
    assert_eq!(output_jaccard(&a, &c), 0.0);
    let e = sample(0, &[(1, &[1])], &[], 1.0);
    assert_eq!(output_jaccard(&e, &e), 0.0);
}

fn random_pool(n: usize, seed: u64) -> Vec<EgoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let y: Vec<usize> = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(0..6)).collect();
            sample(i % 7, &[(1, &[rng.gen_range(0..9)])], &y, i as f64)
        })
        .collect()
}

#[test]
fn annotation_matches_brute_force() {
    let pool = random_pool(200, 5);
    let ann = annotate_pool(&pool, 0.8);
    let mut pairs = 0;
    for i in 0..pool.len() {
        for j in 0..pool.len() {
            let yi: Vec<usize> = pool[i].y.iter().filter_map(|t| t.node()).collect();
            let yj: Vec<usize> = pool[j].y.iter().filter_map(|t| t.node()).collect();
            let mut union: Vec<usize> = yi.clone();
            union.extend(&yj);
            union.sort_unstable();
            union.dedup();
            let inter = union.iter().filter(|n| yi.contains(n) && yj.contains(n)).count();
            let r = if union.is_empty() { 0.0 } else { inter as f64 / union.len() as f64 };
            let expected = i != j && r >= 0.8;
            assert_eq!(ann.is_positive(i, j), expected, "pair ({i},{j})");
            assert_eq!(ann.is_positive(i, j), ann.is_positive(j, i));
            pairs += usize::from(expected);
        }
    }
    assert_eq!(ann.pair_count(), pairs);
    assert_eq!(annotate_pool(&pool, 1.01).pair_count(), 0);
}

#[test]
fn full_overlap_community_pairs_are_positive() {
    let params = SynthParams {
        overlap: 1.0,
        ..SynthParams::default()
    };
    let g = synth_graph(&params, 3).unwrap();
    let s = split(&g, SplitSpec::for_steps(8).unwrap()).unwrap();
    let pool = build_pool(&g, &s, None).unwrap().train;
    let ann = annotate_pool(&pool, 0.8);
    let community = |i: usize| {
        let name = g.node_name(pool[i].target);
        name.contains('m').then(|| name[1..name.find('m').unwrap()].to_string())
    };
    for i in 0..pool.len() {
        for j in 0..pool.len() {
            if i != j && community(i).is_some() && community(i) == community(j) {
                assert!(ann.is_positive(i, j), "{} {}", g.node_name(pool[i].target), g.node_name(pool[j].target));
            }
        }
    }
}

#[test]
fn decay_values() {
    for l in [0.0, 0.5, 3.0] {
        assert_eq!(time_decay(4.0, 4.0, l).unwrap(), 1.0);
        assert_eq!(time_decay(0.0, 1e6, 0.0).unwrap(), 1.0);
    }
    assert!((time_decay(2.0, 3.0, 1.0).unwrap() - 0.3678794).abs() < 1e-7);
    assert!(time_decay(0.0, 1.0, -1.0).is_err());
}

fn constant(tape: &mut Tape, rows: &[&[f64]]) -> crate::numerics::Var {
    let d = rows[0].len();
    tape.constant(vec![rows.len(), d], rows.concat()).unwrap()
}

#[test]
fn nce_four_candidate_anchor() {
    let mut tape = Tape::new();
    let s = constant(&mut tape, &[&[2.0, 1.0, 0.5, 0.0]]);
    let l = in_batch_nce(&mut tape, s, &[None], &[0], 1.0).unwrap();
    let oracle = -libm::log(7.389056098930650 / (7.389056098930650 + 2.718281828459045 + 1.648721270700128 + 1.0));
    assert!((tape.scalar(l) - oracle).abs() < 1e-12);
    assert!((tape.scalar(l) - 0.546006).abs() < 1e-4);
}

#[test]
fn tcl_two_query_hand_oracle() {
    // q0=(1,0), q1=(0,1), p0=(2,0), p1=(0,0.5); times q: 0,1 p: 0,3.
    let mut tape = Tape::new();
    let q = constant(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
    let p = constant(&mut tape, &[&[2.0, 0.0], &[0.0, 0.5]]);
    let times = [0.0, 1.0, 0.0, 3.0];
    let l = tcl_loss_from_embeddings(&mut tape, q, p, &times, 0.5, 0.1).unwrap();
    // Row 0 (self col 0 excluded): h to q1 = 0, to p0 = 2, to p1 = 0.
    let r0 = [0.0, 2.0, 0.0];
    // Row 1: h to q0 = 0, to p0 = 0, to p1 = 0.5 * exp(-0.5 * 2).
    let r1 = [0.0, 0.0, 0.5 * libm::exp(-1.0)];
    let nll = |row: &[f64], t: usize| {
        let z: f64 = row.iter().map(|h| libm::exp(h / 0.1)).sum();
        -(row[t] / 0.1 - libm::log(z))
    };
    let oracle = (nll(&r0, 1) + nll(&r1, 2)) / 2.0;
    assert!((tape.scalar(l) - oracle).abs() < 1e-9, "{} vs {oracle}", tape.scalar(l));
}

#[test]
fn tcl_without_decay_is_plain_infonce() {
    let mut tape = Tape::new();
    let q = constant(&mut tape, &[&[0.3, -0.2], &[0.1, 0.4], &[0.5, 0.5]]);
    let p = constant(&mut tape, &[&[0.2, 0.1], &[-0.3, 0.2], &[0.0, 0.7]]);
    let l0 = tcl_loss_from_embeddings(&mut tape, q, p, &[0.0, 5.0, 9.0, 1.0, 2.0, 3.0], 0.0, 0.1).unwrap();
    let plain = ccl_loss_from_embeddings(&mut tape, q, p, 0.1).unwrap();
    assert_eq!(tape.scalar(l0).to_bits(), tape.scalar(plain).to_bits());
}

#[test]
fn duplicated_pair_is_finite() {
    let mut tape = Tape::new();
    let q = constant(&mut tape, &[&[1.0, 2.0], &[1.0, 2.0]]);
    let p = constant(&mut tape, &[&[1.0, 2.0], &[1.0, 2.0]]);
    let l = tcl_loss_from_embeddings(&mut tape, q, p, &[0.0; 4], 0.0, 0.1).unwrap();
    assert!(tape.scalar(l).is_finite());
    let one = constant(&mut tape, &[&[1.0, 2.0]]);
    assert!(tcl_loss_from_embeddings(&mut tape, one, one, &[0.0; 2], 0.0, 0.1).is_err());
}

#[test]
fn ccl_alignment_and_hand_oracle() {
    let mut tape = Tape::new();
    let a = constant(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
    let b = constant(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
    let swapped = constant(&mut tape, &[&[0.0, 1.0], &[1.0, 0.0]]);
    let aligned = ccl_loss_from_embeddings(&mut tape, a, b, 0.5).unwrap();
    let permuted = ccl_loss_from_embeddings(&mut tape, a, swapped, 0.5).unwrap();
    assert!(tape.scalar(aligned) < tape.scalar(permuted));

    // Anchors v1=(1,2), v2=(0,1); second views w1=(1,1), w2=(2,0); tau=1.
    let v = constant(&mut tape, &[&[1.0, 2.0], &[0.0, 1.0]]);
    let w = constant(&mut tape, &[&[1.0, 1.0], &[2.0, 0.0]]);
    let l = ccl_loss_from_embeddings(&mut tape, v, w, 1.0).unwrap();
    // Anchor 1 candidates: v2=2, w1=3 (pos), w2=2. Anchor 2: v1=2, w1=1, w2=0 (pos).
    let l1 = -libm::log(libm::exp(3.0) / (libm::exp(2.0) + libm::exp(3.0) + libm::exp(2.0)));
    let l2 = -libm::log(1.0 / (libm::exp(2.0) + libm::exp(1.0) + 1.0));
    assert!((tape.scalar(l) - (l1 + l2) / 2.0).abs() < 1e-6);
    assert!((tape.scalar(l) - 1.479525).abs() < 1e-6);
}

fn long_x() -> Vec<Token> {
    vec![
        Token::HIST,
        Token::Node(0),
        Token::Time(1),
        Token::Node(1),
        Token::Node(2),
        Token::Time(2),
        Token::Node(3),
        Token::Time(3),
        Token::Node(4),
        Token::Node(5),
        Token::EOHIST,
    ]
}

#[test]
fn augment_counts_and_order() {
    let x = long_x();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(augment(&x, Augmentation::Mask, 0.0, &mut rng).unwrap(), x);
    let m = augment(&x, Augmentation::Mask, 0.5, &mut rng).unwrap();
    assert_eq!(m.iter().filter(|t| **t == Token::MASK).count(), 4);
    for _ in 0..20 {
        let c = augment(&x, Augmentation::Crop, 0.4, &mut rng).unwrap();
        let mut it = x.iter();
        assert!(c.iter().all(|t| it.any(|u| u == t)), "not a subsequence: {c:?}");
        assert!(c.len() < x.len());
    }
    let short = [Token::HIST, Token::Node(0), Token::Time(1), Token::EOHIST];
    assert!(augment(&short, Augmentation::Mask, 0.5, &mut rng).is_err());
    assert!(augment(&x, Augmentation::Mask, 0.95, &mut rng).is_err());
}

proptest! {
    #[test]
    fn augment_preserves_frame(seed in 0u64..500, portion in 0.0f64..0.8, crop in any::<bool>()) {
        let x = long_x();
        let kind = if crop { Augmentation::Crop } else { Augmentation::Mask };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Ok(a) = augment(&x, kind, portion, &mut rng) {
            prop_assert_eq!(a[0], Token::HIST);
            prop_assert_eq!(a[1], Token::Node(0));
            prop_assert_eq!(*a.last().unwrap(), Token::EOHIST);
            for w in a.windows(2) {
                prop_assert!(!(matches!(w[0], Token::Time(_)) && matches!(w[1], Token::Time(_) | Token::EOHIST)) || !crop);
            }
        }
    }

    #[test]
    fn decay_strictly_decreasing(s in 0.1f64..5.0, lambda in 0.01f64..2.0, d1 in 0.0f64..10.0, extra in 0.01f64..10.0) {
        let near = s * time_decay(0.0, d1, lambda).unwrap();
        let far = s * time_decay(0.0, d1 + extra, lambda).unwrap();
        prop_assert!(far < near);
    }

    #[test]
    fn time_filter_is_strict(seed in 0u64..200) {
        let pool = random_pool(30, seed);
        let query = sample(3, &[(2, &[1])], &[1], 12.5);
        let r = groundtruth_rank(0, &query, &pool, 50, Eligibility::INFERENCE).unwrap();
        prop_assert!(r.candidates.iter().all(|(i, _)| pool[*i].last_time < 12.5));
        prop_assert_eq!(r.candidates.len(), 13);
    }
}

fn tiny_retriever(cosine: bool) -> Retriever {
    let vocab = Vocab::new(4, 20);
    let cfg = BackboneConfig {
        layers: 1,
        heads: 2,
        hidden_dim: 8,
        max_len: 24,
        dropout: 0.0,
        vocab_size: vocab.len(),
    };
    Retriever {
        model: SequenceModel::new(cfg, 17).unwrap(),
        vocab,
        cosine,
    }
}

#[test]
fn duplicate_ranks_first_and_clamping() {
    let r = tiny_retriever(true);
    let pool: Vec<EgoSample> = (0..6)
        .map(|i| sample(i, &[(1, &[i + 6, (i * 3) % 7 + 6]), (2, &[i + 10])], &[i], i as f64))
        .collect();
    let index = r.index(&pool).unwrap();
    let query = pool[3].clone();
    let ranked = r.rank(0, &query, &pool, &index, 3, Eligibility { time_filter: false, exclude: None }).unwrap();
    assert_eq!(ranked.candidates[0].0, 3);
    assert_eq!(ranked.candidates.len(), 3);
    let all = r.rank(0, &query, &pool, &index, 100, Eligibility { time_filter: false, exclude: None }).unwrap();
    assert_eq!(all.candidates.len(), 6);
    assert!(all.candidates.windows(2).all(|w| w[0].1 >= w[1].1));
    let excluded = r.rank(0, &query, &pool, &index, 100, Eligibility::pool_member(3)).unwrap();
    assert!(excluded.ids().iter().all(|&i| i != 3));

    let inductive = EgoSample {
        target: 19,
        x: vec![Token::HIST, Token::Node(19), Token::EOHIST],
        y: vec![Token::PRED, Token::Time(4), Token::EOPRED],
        last_step: 0,
        last_time: 0.0,
        prediction_step: 4,
    };
    let ind = r.rank(0, &inductive, &pool, &index, 3, Eligibility::INFERENCE).unwrap();
    assert_eq!(ind.candidates.len(), 3);
    assert!(ind.candidates.iter().all(|c| c.1.is_finite()));
    assert!(matches!(bm25_rank(0, &inductive, &pool, 3, Eligibility::INFERENCE), Err(Error::NoSignal)));
    assert!(matches!(jaccard_rank(0, &inductive, &pool, 3, Eligibility::INFERENCE), Err(Error::NoSignal)));
    let early = sample(0, &[(1, &[1])], &[1], -1.0);
    assert!(matches!(r.rank(0, &early, &pool, &index, 3, Eligibility::INFERENCE), Err(Error::EmptyCandidates)));
}

#[test]
fn lexical_baselines() {
    let pool = vec![
        sample(0, &[(1, &[5, 6])], &[1], 0.0),
        sample(1, &[(1, &[6, 7]), (2, &[8])], &[1], 0.0),
        sample(2, &[(1, &[9])], &[1], 0.0),
    ];
    let q = sample(3, &[(1, &[6, 7]), (2, &[8])], &[2], 10.0);
    let j = jaccard_rank(0, &q, &pool, 3, Eligibility::INFERENCE).unwrap();
    assert_eq!(j.candidates[0], (1, 1.0));
    let b = bm25_rank(0, &q, &pool, 3, Eligibility::INFERENCE).unwrap();
    assert_eq!(b.candidates[0].0, 1);
    // Hand BM25 for doc 0 (terms 5,6; avgdl = 2): only term 6 matches.
    let idf6 = libm::log(1.0 + (3.0 - 2.0 + 0.5) / (2.0 + 0.5));
    let expected = idf6 * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 2.0 / 2.0));
    let scores = bm25_scores(&q, &pool).unwrap();
    assert!((scores[0] - expected).abs() < 1e-12);
    assert_eq!(scores[2], 0.0);
    let unseen = sample(3, &[(1, &[99])], &[2], 10.0);
    assert!(bm25_scores(&unseen, &pool).unwrap().iter().all(|&s| s == 0.0));
}

#[test]
fn hit_ratio() {
    let rel: BTreeSet<usize> = [4].into_iter().collect();
    assert_eq!(hr_at_k(&[4, 1], &rel, 1), Some(1.0));
    assert_eq!(hr_at_k(&[1, 2, 4], &rel, 1), Some(0.0));
    assert_eq!(hr_at_k(&[1, 2, 4], &rel, 3), Some(1.0));
    assert_eq!(hr_at_k(&[1], &BTreeSet::new(), 1), None);
    let (rate, skipped) = hit_rate(&[(vec![4], rel.clone()), (vec![1], rel), (vec![1], BTreeSet::new())], 1);
    assert_eq!((rate, skipped), (0.5, 1));
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let q = store.insert("q", DiffTensor::uniform(vec![2, 3], 1.0, &mut rng));
    let p = store.insert("p", DiffTensor::uniform(vec![2, 3], 1.0, &mut rng));
    let times = [0.0, 2.0, 1.0, 5.0];
    let tcl = grad_check(&mut store, 1e-5, |tape, s| {
        let (qv, pv) = (tape.param(s, q), tape.param(s, p));
        tcl_loss_from_embeddings(tape, qv, pv, &times, 0.3, 0.1)
    })
    .unwrap();
    let ccl = grad_check(&mut store, 1e-5, |tape, s| {
        let (qv, pv) = (tape.param(s, q), tape.param(s, p));
        ccl_loss_from_embeddings(tape, qv, pv, 0.1)
    })
    .unwrap();
    assert!(tcl < 1e-3 && ccl < 1e-3, "{tcl} {ccl}");
}

#[test]
fn training_flags_and_descent() {
    let params = SynthParams {
        communities: 2,
        nodes_per_community: 4,
        ..SynthParams::default()
    };
    let g = synth_graph(&params, 1).unwrap();
    let s = split(&g, SplitSpec::for_steps(8).unwrap()).unwrap();
    let pool = build_pool(&g, &s, None).unwrap().train;
    let vocab = build_vocab(&g).unwrap();
    let ann = annotate_pool(&pool, 0.8);
    let cfg = BackboneConfig {
        layers: 1,
        heads: 2,
        hidden_dim: 16,
        max_len: 64,
        dropout: 0.0,
        vocab_size: vocab.len(),
    };
    let backbone = SequenceModel::new(cfg, 4).unwrap();
    let base = RetrieverConfig {
        batch_size: 4,
        epochs: 3,
        lambda: 0.01,
        ..RetrieverConfig::default()
    };
    let off = RetrieverConfig { use_decay: false, ..base };
    let zero = RetrieverConfig { lambda: 0.0, ..base };
    let (a, ra) = train_retriever(&pool, &ann, &backbone, vocab, &off).unwrap();
    let (b, rb) = train_retriever(&pool, &ann, &backbone, vocab, &zero).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let (c, _) = train_retriever(&pool, &ann, &backbone, vocab, &base).unwrap();
    assert_ne!(a, c);
    // The output projection is untouched by retriever training.
    let out = backbone.params.require("out.w").unwrap();
    assert_eq!(a.model.params.get(out), backbone.params.get(out));
    let none = annotate_pool(&pool, 1.01);
    assert!(matches!(train_retriever(&pool, &none, &backbone, vocab, &base), Err(Error::NoPositives)));
}
