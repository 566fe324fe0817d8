//! Text artifacts exchanged between pipeline stages.
//!
//! Every line-oriented format skips blank lines and `#` comments. Keyed
//! formats use `id: payload` lines with ids strictly ascending.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use dygrag_core::graphdata::{Split, TemporalGraph};
use dygrag_core::retriever::{Annotation, RankedDemos};
use dygrag_core::sequencer::{parse_tokens, render_tokens, EgoSample};

use crate::error::{format_error, io, Result};

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    std::fs::write(path, text).map_err(io(path))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// `string_id integer_id` per line, in id order.
pub fn render_node_map(graph: &TemporalGraph) -> String {
    let mut s = String::new();
    for (i, name) in graph.node_names().iter().enumerate() {
        writeln!(s, "{name} {i}").unwrap();
    }
    s
}

/// Returns names indexed by dense id; ids must be exactly `0..n`.
pub fn parse_node_map(path: &Path, text: &str) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for (line, l) in content_lines(text) {
        let mut it = l.split_whitespace();
        let (Some(name), Some(id), None) = (it.next(), it.next(), it.next()) else {
            return Err(format_error(path, line, "expected `string_id integer_id`"));
        };
        let id: usize = id.parse().map_err(|_| format_error(path, line, format!("bad id `{id}`")))?;
        if id != names.len() {
            return Err(format_error(path, line, format!("expected id {}, found {id}", names.len())));
        }
        names.push(name.to_string());
    }
    Ok(names)
}

/// Step ranges of the temporal split, one subset per line.
pub fn render_split(split: &Split) -> String {
    let s = split.spec;
    format!(
        "train 1-{}\nval {}\ntest {}\n",
        s.train_last, s.val_step, s.test_step
    )
}

/// Columns: target, prediction step, last step, raw last time, x tokens, y tokens.
pub fn render_pool(samples: &[EgoSample]) -> String {
    let mut s = String::from("# target\tprediction_step\tlast_step\tlast_time\tx\ty\n");
    for e in samples {
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.target,
            e.prediction_step,
            e.last_step,
            e.last_time,
            render_tokens(&e.x),
            render_tokens(&e.y)
        )
        .unwrap();
    }
    s
}

pub fn parse_pool(path: &Path, text: &str) -> Result<Vec<EgoSample>> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let cols: Vec<&str> = l.split('\t').collect();
        if cols.len() != 6 {
            return Err(format_error(path, line, format!("expected 6 tab-separated columns, found {}", cols.len())));
        }
        let num = |i: usize, what: &str| -> Result<usize> {
            cols[i].trim().parse().map_err(|_| format_error(path, line, format!("bad {what} `{}`", cols[i])))
        };
        let last_time: f64 = cols[3]
            .trim()
            .parse()
            .map_err(|_| format_error(path, line, format!("bad last_time `{}`", cols[3])))?;
        let tokens = |i: usize| parse_tokens(cols[i]).map_err(|e| format_error(path, line, e.to_string()));
        out.push(EgoSample {
            target: num(0, "target")?,
            prediction_step: num(1, "prediction step")?,
            last_step: num(2, "last step")?,
            last_time,
            x: tokens(4)?,
            y: tokens(5)?,
        });
    }
    Ok(out)
}

fn keyed<'a>(path: &Path, text: &'a str) -> Result<Vec<(usize, usize, &'a str)>> {
    let mut out: Vec<(usize, usize, &str)> = Vec::new();
    for (line, l) in content_lines(text) {
        let Some((id, rest)) = l.split_once(':') else {
            return Err(format_error(path, line, "expected `id: ...`"));
        };
        let id: usize = id.trim().parse().map_err(|_| format_error(path, line, format!("bad id `{id}`")))?;
        if out.last().is_some_and(|p| p.1 >= id) {
            return Err(format_error(path, line, format!("id {id} is out of order or repeated")));
        }
        out.push((line, id, rest.trim()));
    }
    Ok(out)
}

fn id_list(path: &Path, line: usize, s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| format_error(path, line, format!("bad id `{v}`"))))
        .collect()
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn render_annotation(a: &Annotation) -> String {
    let mut s = format!("# threshold {}\n", a.threshold);
    for (q, p) in a.positives.iter().enumerate() {
        writeln!(s, "{q}: {}", join(p)).unwrap();
    }
    s
}

pub fn parse_annotation(path: &Path, text: &str) -> Result<Annotation> {
    let threshold = text
        .lines()
        .find_map(|l| l.strip_prefix("# threshold "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format_error(path, 1, "missing `# threshold` header"))?;
    let mut positives = Vec::new();
    for (line, id, rest) in keyed(path, text)? {
        if id != positives.len() {
            return Err(format_error(path, line, format!("expected id {}, found {id}", positives.len())));
        }
        positives.push(id_list(path, line, rest)?);
    }
    Ok(Annotation { threshold, positives })
}

/// Demonstrations per query; `None` marks a query where the retriever has no
/// signal, written as `-`.
pub type DemoList = Vec<(usize, Option<RankedDemos>)>;

/// `q: cand score, cand score` or `q: -`.
pub fn render_demos(demos: &DemoList) -> String {
    let mut s = String::new();
    for (q, r) in demos {
        match r {
            None => writeln!(s, "{q}: -").unwrap(),
            Some(r) => {
                let body: Vec<String> = r.candidates.iter().map(|(c, v)| format!("{c} {v}")).collect();
                writeln!(s, "{q}: {}", body.join(", ")).unwrap();
            }
        }
    }
    s
}

pub fn parse_demos(path: &Path, text: &str) -> Result<DemoList> {
    let mut out = Vec::new();
    for (line, id, rest) in keyed(path, text)? {
        if rest == "-" {
            out.push((id, None));
            continue;
        }
        let mut candidates = Vec::new();
        for item in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let bad = || format_error(path, line, format!("expected `candidate score`, found `{item}`"));
            let (c, v) = item.split_once(' ').ok_or_else(bad)?;
            candidates.push((c.parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?));
        }
        out.push((id, Some(RankedDemos { query: id, candidates })));
    }
    Ok(out)
}

/// `query_id: node,node,...`, used for predictions and truths alike.
pub fn render_node_lists(rows: &[(usize, Vec<usize>)]) -> String {
    let mut s = String::new();
    for (q, nodes) in rows {
        writeln!(s, "{q}: {}", join(nodes)).unwrap();
    }
    s
}

pub fn parse_node_lists(path: &Path, text: &str) -> Result<Vec<(usize, Vec<usize>)>> {
    keyed(path, text)?
        .into_iter()
        .map(|(line, id, rest)| Ok((id, id_list(path, line, rest)?)))
        .collect()
}

pub fn truth_sets(rows: &[(usize, Vec<usize>)]) -> Vec<(usize, BTreeSet<usize>)> {
    rows.iter().map(|(q, v)| (*q, v.iter().copied().collect())).collect()
}
