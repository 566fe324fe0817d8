//! Token alphabet and ego-sequence construction.
//!
//! A target node's history becomes
//! `[hist] v [time_1] a b [time_2] c ... [eohist]` and its future becomes
//! `[pred] [time_k] d e ... [eopred]`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::graphdata::{Split, TemporalGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Special {
    Pad,
    Hist,
    EoHist,
    Pred,
    EoPred,
    Mask,
    Unk,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::Pad,
        Special::Hist,
        Special::EoHist,
        Special::Pred,
        Special::EoPred,
        Special::Mask,
        Special::Unk,
    ];

    fn name(self) -> &'static str {
        match self {
            Special::Pad => "pad",
            Special::Hist => "hist",
            Special::EoHist => "eohist",
            Special::Pred => "pred",
            Special::EoPred => "eopred",
            Special::Mask => "mask",
            Special::Unk => "unk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Token {
    Special(Special),
    /// Time step `1..=T+1`.
    Time(usize),
    /// Dense node id.
    Node(usize),
}

impl Token {
    pub const PAD: Token = Token::Special(Special::Pad);
    pub const HIST: Token = Token::Special(Special::Hist);
    pub const EOHIST: Token = Token::Special(Special::EoHist);
    pub const PRED: Token = Token::Special(Special::Pred);
    pub const EOPRED: Token = Token::Special(Special::EoPred);
    pub const MASK: Token = Token::Special(Special::Mask);

    pub fn node(self) -> Option<usize> {
        match self {
            Token::Node(n) => Some(n),
            _ => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Special(s) => write!(f, "[{}]", s.name()),
            Token::Time(k) => write!(f, "[time_{k}]"),
            Token::Node(n) => write!(f, "n{n}"),
        }
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid("Token::from_str", format!("unrecognised token `{s}`"));
        if let Some(inner) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            if let Some(k) = inner.strip_prefix("time_") {
                return k.parse().map(Token::Time).map_err(|_| bad());
            }
            return Special::ALL
                .iter()
                .find(|sp| sp.name() == inner)
                .map(|&sp| Token::Special(sp))
                .ok_or_else(bad);
        }
        s.strip_prefix('n')
            .and_then(|n| n.parse().ok())
            .map(Token::Node)
            .ok_or_else(bad)
    }
}

pub fn render_tokens(tokens: &[Token]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{t}"));
    }
    s
}

pub fn parse_tokens(s: &str) -> Result<Vec<Token>> {
    s.split_whitespace().map(Token::from_str).collect()
}

/// Bijection between tokens and embedding rows.
///
/// Layout: the seven specials (pad first), then `[time_1]..[time_{T+1}]`,
/// then every node observed anywhere in the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    steps: usize,
    nodes: usize,
}

impl Vocab {
    pub fn new(steps: usize, nodes: usize) -> Self {
        Self { steps, nodes }
    }

    pub fn special_count(&self) -> usize {
        Special::ALL.len()
    }

    pub fn time_count(&self) -> usize {
        self.steps + 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.special_count() + self.time_count() + self.nodes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, t: Token) -> Result<usize> {
        let ns = self.special_count();
        match t {
            Token::Special(s) => Ok(Special::ALL.iter().position(|&x| x == s).expect("listed")),
            Token::Time(k) if (1..=self.steps + 1).contains(&k) => Ok(ns + k - 1),
            Token::Node(n) if n < self.nodes => Ok(ns + self.time_count() + n),
            _ => Err(invalid("Vocab::index", format!("token {t} outside the vocabulary"))),
        }
    }

    pub fn token(&self, index: usize) -> Result<Token> {
        let ns = self.special_count();
        let nt = self.time_count();
        if index < ns {
            Ok(Token::Special(Special::ALL[index]))
        } else if index < ns + nt {
            Ok(Token::Time(index - ns + 1))
        } else if index < self.len() {
            Ok(Token::Node(index - ns - nt))
        } else {
            Err(invalid("Vocab::token", format!("index {index} outside the vocabulary")))
        }
    }

    pub fn encode(&self, tokens: &[Token]) -> Result<Vec<usize>> {
        tokens.iter().map(|&t| self.index(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<Token>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn pad_index(&self) -> usize {
        0
    }

    pub fn is_node_index(&self, index: usize) -> bool {
        index >= self.special_count() + self.time_count() && index < self.len()
    }
}

pub fn build_vocab(graph: &TemporalGraph) -> Result<Vocab> {
    let steps = graph
        .step_count()
        .ok_or_else(|| invalid("build_vocab", "graph must be binned first"))?;
    Ok(Vocab::new(steps, graph.node_count()))
}

/// One target node's history `x` and future `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoSample {
    pub target: usize,
    pub x: Vec<Token>,
    pub y: Vec<Token>,
    /// Step of the final interaction inside `x` (0 for an empty history).
    pub last_step: usize,
    /// Raw timestamp of the final interaction inside `x` (0 for an empty history).
    pub last_time: f64,
    pub prediction_step: usize,
}

impl EgoSample {
    pub fn has_history(&self) -> bool {
        self.x.iter().any(|t| matches!(t, Token::Time(_)))
    }

    /// Distinct node tokens of `y`.
    pub fn y_nodes(&self) -> BTreeSet<usize> {
        self.y.iter().filter_map(|t| t.node()).collect()
    }

    /// Node tokens of `x` after the target, in order.
    pub fn history_nodes(&self) -> Vec<usize> {
        self.x.iter().skip(2).filter_map(|t| t.node()).collect()
    }

    /// `x` followed by `y`.
    pub fn full(&self) -> Vec<Token> {
        let mut v = self.x.clone();
        v.extend_from_slice(&self.y);
        v
    }
}

/// Per-node interaction lists in raw-time order.
#[derive(Debug, Clone)]
pub struct Timeline {
    /// (partner, step, raw time)
    by_node: Vec<Vec<(usize, usize, f64)>>,
}

impl Timeline {
    pub fn new(graph: &TemporalGraph) -> Self {
        let mut by_node = alloc::vec![Vec::new(); graph.node_count()];
        for e in graph.events() {
            by_node[e.u].push((e.v, e.step, e.t));
            by_node[e.v].push((e.u, e.step, e.t));
        }
        Self { by_node }
    }

    pub fn interactions(&self, node: usize) -> &[(usize, usize, f64)] {
        &self.by_node[node]
    }
}

/// Builds the sample for `target` predicting `prediction_step`.
///
/// `max_history` bounds the length of `x`; longer histories lose their
/// oldest time blocks first.
pub fn ego_sequence(
    timeline: &Timeline,
    target: usize,
    prediction_step: usize,
    max_history: Option<usize>,
) -> Result<EgoSample> {
    if target >= timeline.by_node.len() || timeline.by_node[target].is_empty() {
        return Err(Error::UnknownNode(format!("n{target}")));
    }
    let mut x = alloc::vec![Token::HIST, Token::Node(target)];
    let mut y = alloc::vec![Token::PRED, Token::Time(prediction_step)];
    let mut current = 0;
    let mut last_step = 0;
    let mut last_time = 0.0;
    for &(partner, step, t) in timeline.interactions(target) {
        if step < prediction_step {
            if step != current {
                x.push(Token::Time(step));
                current = step;
            }
            x.push(Token::Node(partner));
            last_step = step;
            last_time = t;
        } else if step == prediction_step {
            y.push(Token::Node(partner));
        }
    }
    x.push(Token::EOHIST);
    y.push(Token::EOPRED);
    if let Some(limit) = max_history {
        x = truncate_history(x, limit)?;
    }
    Ok(EgoSample {
        target,
        x,
        y,
        last_step,
        last_time,
        prediction_step,
    })
}

/// Drops the oldest time blocks (then the oldest nodes of the remaining
/// block) until `x` fits in `limit` tokens.
pub fn truncate_history(mut x: Vec<Token>, limit: usize) -> Result<Vec<Token>> {
    if limit < 5 {
        return Err(invalid("truncate_history", "limit must leave room for one time block"));
    }
    while x.len() > limit {
        let times: Vec<usize> = x
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, Token::Time(_)))
            .map(|(i, _)| i)
            .collect();
        if times.len() >= 2 {
            x.drain(times[0]..times[1]);
        } else if times.len() == 1 {
            let excess = x.len() - limit;
            x.drain(times[0] + 1..times[0] + 1 + excess);
        } else {
            break;
        }
    }
    Ok(x)
}

/// Training pool plus validation and test queries.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalPool {
    pub train: Vec<EgoSample>,
    pub val: Vec<EgoSample>,
    pub test: Vec<EgoSample>,
    /// Nodes active in training that had nothing before their last training step.
    pub skipped: usize,
}

pub fn build_pool(graph: &TemporalGraph, split: &Split, max_history: Option<usize>) -> Result<RetrievalPool> {
    let timeline = Timeline::new(graph);
    let spec = split.spec;
    let mut pool = RetrievalPool {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        skipped: 0,
    };
    for node in 0..graph.node_count() {
        let inter = timeline.interactions(node);
        let steps: BTreeSet<usize> = inter.iter().map(|i| i.1).collect();
        let last_train = steps.range(..=spec.train_last).next_back().copied();
        if let Some(last) = last_train {
            if steps.range(..last).next().is_some() {
                pool.train.push(ego_sequence(&timeline, node, last, max_history)?);
            } else {
                pool.skipped += 1;
            }
        }
        if steps.contains(&spec.val_step) {
            pool.val.push(ego_sequence(&timeline, node, spec.val_step, max_history)?);
        }
        if steps.contains(&spec.test_step) {
            pool.test.push(ego_sequence(&timeline, node, spec.test_step, max_history)?);
        }
    }
    Ok(pool)
}
