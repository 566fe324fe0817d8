//! Temporal interaction graphs: edge-list parsing, equal-width time binning,
//! temporal train/validation/test splits and a planted synthetic generator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// One undirected interaction. `step` is 0 until the graph is binned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalEvent {
    pub u: usize,
    pub v: usize,
    pub t: f64,
    pub step: usize,
}

impl TemporalEvent {
    pub fn other(&self, node: usize) -> Option<usize> {
        if self.u == node {
            Some(self.v)
        } else if self.v == node {
            Some(self.u)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Binning {
    steps: usize,
    min: f64,
    max: f64,
}

/// Timestamped interactions over densely indexed nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraph {
    node_names: Vec<String>,
    events: Vec<TemporalEvent>,
    binning: Option<Binning>,
    dropped_self_loops: usize,
}

impl TemporalGraph {
    /// Builds a graph from named interactions. Self-loops are dropped and
    /// events are stably sorted by time.
    pub fn from_named<'a, I>(events: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, f64)>,
    {
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut names = Vec::new();
        let mut out = Vec::new();
        let mut dropped = 0;
        let mut intern = |name: &str, names: &mut Vec<String>| -> usize {
            if let Some(&i) = index.get(name) {
                return i;
            }
            names.push(name.to_string());
            index.insert(name.to_string(), names.len() - 1);
            names.len() - 1
        };
        for (a, b, t) in events {
            if !t.is_finite() || t < 0.0 {
                return Err(invalid("TemporalGraph", format!("timestamp {t} is not a finite non-negative number")));
            }
            let u = intern(a, &mut names);
            let v = intern(b, &mut names);
            if u == v {
                dropped += 1;
                continue;
            }
            out.push(TemporalEvent { u, v, t, step: 0 });
        }
        if out.is_empty() {
            return Err(Error::EmptyInput);
        }
        out.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Self {
            node_names: names,
            events: out,
            binning: None,
            dropped_self_loops: dropped,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn node_name(&self, id: usize) -> &str {
        &self.node_names[id]
    }

    pub fn node_id(&self, name: &str) -> Option<usize> {
        self.node_names.iter().position(|n| n == name)
    }

    pub fn events(&self) -> &[TemporalEvent] {
        &self.events
    }

    pub fn dropped_self_loops(&self) -> usize {
        self.dropped_self_loops
    }

    /// Number of time steps `T`, once binned.
    pub fn step_count(&self) -> Option<usize> {
        self.binning.map(|b| b.steps)
    }

    /// Step index in `1..=T` of a raw timestamp, once binned.
    pub fn step_of(&self, t: f64) -> Option<usize> {
        self.binning.map(|b| bin_index(t, b))
    }

    /// Renders the graph as `u v t` lines, one per event.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&self.node_names[e.u]);
            s.push(' ');
            s.push_str(&self.node_names[e.v]);
            s.push(' ');
            s.push_str(&format!("{}\n", e.t));
        }
        s
    }
}

fn bin_index(t: f64, b: Binning) -> usize {
    let raw = ((t - b.min) * b.steps as f64 / (b.max - b.min)) as usize + 1;
    raw.clamp(1, b.steps)
}

/// Parses whitespace-separated `u v t` lines; `#` starts a comment and
/// columns after the third are ignored.
pub fn parse_edge_list(text: &str) -> Result<TemporalGraph> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(u), Some(v), Some(t)) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected `u v t`".into(),
            });
        };
        let t: f64 = t.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("timestamp `{t}` is not a number"),
        })?;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("timestamp `{t}` must be finite and non-negative"),
            });
        }
        rows.push((u, v, t));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    TemporalGraph::from_named(rows)
}

/// Partitions the raw time range into `steps` equal-width intervals and
/// assigns each event its 1-based interval index.
pub fn bin_time_steps(mut graph: TemporalGraph, steps: usize) -> Result<TemporalGraph> {
    if steps < 3 {
        return Err(invalid("bin_time_steps", "need at least 3 steps for train/validation/test"));
    }
    let min = graph.events.iter().map(|e| e.t).fold(f64::INFINITY, f64::min);
    let max = graph.events.iter().map(|e| e.t).fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::DegenerateTimeRange);
    }
    let b = Binning { steps, min, max };
    for e in &mut graph.events {
        e.step = bin_index(e.t, b);
    }
    graph.binning = Some(b);
    Ok(graph)
}

/// Step ranges for a temporal split: train `1..=T-2`, validation `T-1`, test `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_last: usize,
    pub val_step: usize,
    pub test_step: usize,
}

impl SplitSpec {
    pub fn for_steps(steps: usize) -> Result<Self> {
        if steps < 3 {
            return Err(invalid("SplitSpec", "need at least 3 steps"));
        }
        Ok(Self {
            train_last: steps - 2,
            val_step: steps - 1,
            test_step: steps,
        })
    }

    pub fn steps(&self) -> usize {
        self.test_step
    }
}

/// Event indices routed by step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub spec: SplitSpec,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(graph: &TemporalGraph, spec: SplitSpec) -> Result<Split> {
    if graph.step_count() != Some(spec.steps()) {
        return Err(invalid("split", "graph must be binned with the split's step count"));
    }
    let mut out = Split {
        spec,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, e) in graph.events.iter().enumerate() {
        if e.step <= spec.train_last {
            out.train.push(i);
        } else if e.step == spec.val_step {
            out.val.push(i);
        } else {
            out.test.push(i);
        }
    }
    if out.val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    if out.test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    Ok(out)
}

/// Parameters of the planted synthetic generator.
///
/// Each community owns disjoint node pools: members, history partners, an
/// ordered list of shared targets and a set of extra targets. Members meet
/// random partners in the early steps. In their final three active steps they
/// meet `round(overlap * targets)` nodes of the community's current shared
/// window plus random extras, so same-community outputs overlap by design and
/// cross-community outputs never do.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub communities: usize,
    pub nodes_per_community: usize,
    pub steps: usize,
    pub overlap: f64,
    /// Size of each member's target set per final step.
    pub targets: usize,
    /// History partner pool size per community.
    pub partners: usize,
    /// Partners met per early step.
    pub history_per_step: usize,
    /// Raw time units per step.
    pub step_width: f64,
    /// Shift the shared target window by one every `drift_every` steps (0 = static).
    pub drift_every: usize,
    /// Fraction of members that stop interacting before the validation step.
    pub leaver_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            communities: 4,
            nodes_per_community: 10,
            steps: 8,
            overlap: 0.9,
            targets: 10,
            partners: 6,
            history_per_step: 2,
            step_width: 100.0,
            drift_every: 0,
            leaver_fraction: 0.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(invalid("synth_graph", m));
        if self.communities * self.nodes_per_community < 4 {
            return bad("communities * nodes_per_community must be at least 4");
        }
        if self.steps < 4 {
            return bad("steps must be at least 4");
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.leaver_fraction) {
            return bad("leaver_fraction must lie in [0, 1]");
        }
        if self.targets == 0 || self.partners == 0 || self.history_per_step == 0 {
            return bad("targets, partners and history_per_step must be positive");
        }
        if self.history_per_step > self.partners {
            return bad("history_per_step exceeds the partner pool");
        }
        if !(self.step_width >= 2.0) {
            return bad("step_width must be at least 2");
        }
        if self.leaver_fraction > 0.0 && self.steps < 7 {
            return bad("leavers need at least 7 steps");
        }
        Ok(())
    }

    pub fn shared_count(&self) -> usize {
        libm::round(self.overlap * self.targets as f64) as usize
    }

    fn window_shift(&self, step: usize) -> usize {
        if self.drift_every == 0 {
            0
        } else {
            step / self.drift_every
        }
    }
}

/// Generates a binned synthetic dynamic graph with a planted retrieval signal.
pub fn synth_graph(params: &SynthParams, seed: u64) -> Result<TemporalGraph> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = params;
    let t_steps = p.steps;
    let shared = p.shared_count();
    let extras = p.targets - shared;
    let max_shift = p.window_shift(t_steps);
    let mut names: Vec<String> = Vec::new();
    let mut events: Vec<(usize, usize, usize)> = Vec::new(); // (u, v, step)

    let alloc_nodes = |prefix: String, n: usize, names: &mut Vec<String>| -> Vec<usize> {
        (0..n)
            .map(|j| {
                names.push(format!("{prefix}{j}"));
                names.len() - 1
            })
            .collect()
    };

    for c in 0..p.communities {
        let members = alloc_nodes(format!("c{c}m"), p.nodes_per_community, &mut names);
        let partners = alloc_nodes(format!("c{c}p"), p.partners, &mut names);
        let shared_list = alloc_nodes(format!("c{c}t"), shared + max_shift, &mut names);
        let extra_pool = alloc_nodes(format!("c{c}e"), p.targets.max(1), &mut names);

        let leavers = libm::round(p.leaver_fraction * members.len() as f64) as usize;
        for (i, &m) in members.iter().enumerate() {
            // Leavers end their activity before the validation step.
            let end = if i < leavers { rng.gen_range(5..=t_steps - 2) } else { t_steps };
            for step in 1..end - 2 {
                for &q in partners.choose_multiple(&mut rng, p.history_per_step) {
                    events.push((m, q, step));
                }
            }
            for step in end - 2..=end {
                let shift = p.window_shift(step);
                for &q in &shared_list[shift..shift + shared] {
                    events.push((m, q, step));
                }
                for &q in extra_pool.choose_multiple(&mut rng, extras) {
                    events.push((m, q, step));
                }
            }
        }
    }

    // Random offsets inside each step's window; within-step order is random.
    let w = p.step_width;
    let mut timed: Vec<(usize, usize, f64)> = events
        .iter()
        .map(|&(u, v, step)| {
            let off = rng.gen_range(1..(w as u64)) as f64;
            (u, v, (step - 1) as f64 * w + off)
        })
        .collect();
    // Pin the raw range to [0, T * width] so equal-width binning recovers the
    // generating steps exactly.
    let first = events.iter().position(|e| e.2 == 1).ok_or_else(|| invalid("synth_graph", "no step-1 events"))?;
    timed[first].2 = 0.0;
    let last = events
        .iter()
        .rposition(|e| e.2 == t_steps)
        .ok_or_else(|| invalid("synth_graph", "no final-step events"))?;
    timed[last].2 = t_steps as f64 * w;

    let mut out: Vec<TemporalEvent> = timed.iter().map(|&(u, v, t)| TemporalEvent { u, v, t, step: 0 }).collect();
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    let g = TemporalGraph {
        node_names: names,
        events: out,
        binning: None,
        dropped_self_loops: 0,
    };
    bin_time_steps(g, t_steps)
}
