//! Dynamic reverse-mode tape.
//!
//! Each forward pass records its operations on a fresh [`Tape`]. Calling
//! [`Tape::backward`] walks the records in reverse and accumulates (sums)
//! gradients into the [`ParamStore`] entries that require them. Nodes whose
//! inputs carry no gradient are skipped entirely, so frozen sub-graphs cost
//! only their forward pass.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{numel, ParamId, ParamStore};
use crate::error::{invalid, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Gather { table: Var, rows: Vec<usize> },
    MaskedMeanRows { x: Var, weights: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, probs: Vec<f64>, count: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
}

/// Splits a shape into (rows, cols) with the last axis as columns.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (numel(&shape[..shape.len() - 1]), shape[shape.len() - 1]),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = if v == f64::NEG_INFINITY { 0.0 } else { libm::exp(v - max) };
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(invalid("constant", "data length does not match shape"));
        }
        Ok(self.push(shape, value, Op::Constant, false))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), t.requires_grad);
        self.param_vars.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(invalid("transpose", "expects a matrix"));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(self.value(a), r, c);
        let ng = self.ng(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    /// Adds a row vector `b` (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(a));
        if numel(self.shape(b)) != c {
            return Err(self.mismatch("add_row", a, b));
        }
        let bv = self.value(b);
        let out = self.value(a).chunks(c).flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y)).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    /// Multiplies every row of `a` elementwise by the row vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(a));
        if numel(self.shape(b)) != c {
            return Err(self.mismatch("mul_row", a, b));
        }
        let bv = self.value(b);
        let out = self.value(a).chunks(c).flat_map(|row| row.iter().zip(bv).map(|(x, y)| x * y)).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulRow(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| libm::exp(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(invalid("log", "non-positive input"));
        }
        let out = self.value(a).iter().map(|&x| libm::log(x)).collect();
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Log(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), ng)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), ng)
    }

    /// Softmax over the last axis. `-inf` entries receive probability zero.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a));
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for (row, o) in src.chunks(c).zip(out.chunks_mut(c)) {
            if row.iter().all(|&v| v == f64::NEG_INFINITY) {
                return Err(invalid("softmax_rows", "row is entirely masked"));
            }
            softmax_row(row, o);
        }
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a), ng))
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = rows_cols(self.shape(a));
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for (row, o) in src.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            for (oo, &x) in o.iter_mut().zip(row) {
                *oo = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::LayerNormRows { x: a, inv_std }, ng)
    }

    /// Embedding lookup: selects `rows` from a 2-D table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(invalid("gather_rows", "table must be a matrix"));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(invalid("gather_rows", alloc::format!("row {bad} out of range for {n} rows")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let ng = self.ng(table);
        Ok(self.push(vec![rows.len(), c], out, Op::Gather { table, rows: rows.to_vec() }, ng))
    }

    /// Mean over rows restricted to rows with a non-zero mask entry; yields `1 x cols`.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a));
        if mask.len() != r {
            return Err(Error::ShapeMismatch {
                op: "masked_mean_rows",
                left: self.shape(a).to_vec(),
                right: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m != 0.0).count();
        if count == 0 {
            return Err(invalid("masked_mean_rows", "mask selects no rows"));
        }
        let weights: Vec<f64> = mask.iter().map(|&m| if m != 0.0 { 1.0 / count as f64 } else { 0.0 }).collect();
        let mut out = vec![0.0; c];
        for (row, &w) in self.value(a).chunks(c).zip(&weights) {
            if w != 0.0 {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        for o in out.iter_mut() {
            *o /= count as f64;
        }
        let ng = self.ng(a);
        Ok(self.push(vec![1, c], out, Op::MaskedMeanRows { x: a, weights }, ng))
    }

    /// Stacks matrices with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let (_, c) = rows_cols(self.shape(first));
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = rows_cols(self.shape(p));
            if pc != c {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Joins matrices with equal row counts along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let (r, _) = rows_cols(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = rows_cols(self.shape(p));
            if pr != r {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a));
        if start + len > r {
            return Err(invalid("slice_rows", "range out of bounds"));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x: a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a));
        if start + len > c {
            return Err(invalid("slice_cols", "range out of bounds"));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x: a, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Mean(a), ng)
    }

    /// Mean softmax cross-entropy of `logits` rows against `targets`,
    /// skipping rows whose target equals `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: s.to_vec(),
                right: vec![targets.len()],
            });
        }
        let (r, c) = (s[0], s[1]);
        let count = targets.iter().filter(|&&t| t != ignore_index).count();
        if count == 0 {
            return Err(invalid("cross_entropy", "every position is ignored"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore_index && t >= c) {
            return Err(invalid("cross_entropy", alloc::format!("target {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for (i, (row, p)) in self.value(logits).chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let t = targets[i];
            if t == ignore_index {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + libm::log(
                    row.iter()
                        .map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { libm::exp(v - max) })
                        .sum::<f64>(),
                );
            loss += lse - row[t];
            softmax_row(row, p);
        }
        let count = count as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            vec![],
            vec![loss / count],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore: ignore_index,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Back-propagates from a scalar `root`, summing gradients into every
    /// parameter of `store` that was recorded with `requires_grad`.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => store.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let bt = transpose_raw(self.value(*b), k, m);
                    let da = matmul_raw(g, &bt, n, m, k);
                    self.acc(grads, *a, |buf| buf.iter_mut().zip(&da).for_each(|(x, y)| *x += y));
                }
                if self.ng(*b) {
                    let at = transpose_raw(self.value(*a), n, k);
                    let db = matmul_raw(&at, g, k, n, m);
                    self.acc(grads, *b, |buf| buf.iter_mut().zip(&db).for_each(|(x, y)| *x += y));
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let gt = transpose_raw(g, s[1], s[0]);
                self.acc(grads, *a, |buf| buf.iter_mut().zip(&gt).for_each(|(x, y)| *x += y));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(grads, *b, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::AddRow(a, b) => {
                let (_, c) = rows_cols(self.shape(*a));
                self.acc(grads, *a, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(grads, *b, |buf| {
                    for row in g.chunks(c) {
                        buf.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |buf| {
                    for ((x, gi), bi) in buf.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((x, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (_, c) = rows_cols(self.shape(*a));
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |buf| {
                    for (brow, grow) in buf.chunks_mut(c).zip(g.chunks(c)) {
                        for ((x, gi), bi) in brow.iter_mut().zip(grow).zip(bv) {
                            *x += gi * bi;
                        }
                    }
                });
                self.acc(grads, *b, |buf| {
                    for (arow, grow) in av.chunks(c).zip(g.chunks(c)) {
                        for ((x, gi), ai) in buf.iter_mut().zip(grow).zip(arow) {
                            *x += gi * ai;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y * s));
            }
            Op::Exp(a) => {
                let out = &node.value;
                self.acc(grads, *a, |buf| {
                    for ((x, gi), o) in buf.iter_mut().zip(g).zip(out) {
                        *x += gi * o;
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |buf| {
                    for ((x, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                        *x += gi / ai;
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |buf| {
                    for ((x, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |buf| {
                    for ((x, gi), &ai) in buf.iter_mut().zip(g).zip(av) {
                        *x += gi * gelu_grad(ai);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (_, c) = rows_cols(self.shape(*a));
                let out = &node.value;
                self.acc(grads, *a, |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                        for ((x, gi), yi) in brow.iter_mut().zip(grow).zip(yrow) {
                            *x += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x: a, inv_std } => {
                let (_, c) = rows_cols(self.shape(*a));
                let out = &node.value;
                let n = c as f64;
                self.acc(grads, *a, |buf| {
                    for (((brow, grow), yrow), is) in
                        buf.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)).zip(inv_std)
                    {
                        let mean_g = grow.iter().sum::<f64>() / n;
                        let mean_gy = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum::<f64>() / n;
                        for ((x, gi), yi) in brow.iter_mut().zip(grow).zip(yrow) {
                            *x += is * (gi - mean_g - yi * mean_gy);
                        }
                    }
                });
            }
            Op::Gather { table, rows } => {
                let c = self.shape(*table)[1];
                self.acc(grads, *table, |buf| {
                    for (grow, &r) in g.chunks(c).zip(rows) {
                        for (x, gi) in buf[r * c..(r + 1) * c].iter_mut().zip(grow) {
                            *x += gi;
                        }
                    }
                });
            }
            Op::MaskedMeanRows { x: a, weights } => {
                let (_, c) = rows_cols(self.shape(*a));
                self.acc(grads, *a, |buf| {
                    for (brow, &w) in buf.chunks_mut(c).zip(weights) {
                        if w != 0.0 {
                            for (x, gi) in brow.iter_mut().zip(g) {
                                *x += gi * w;
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    let seg = &g[offset..offset + len];
                    self.acc(grads, p, |buf| buf.iter_mut().zip(seg).for_each(|(x, y)| *x += y));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = rows_cols(&node.shape);
                let mut col = 0;
                for &p in parts {
                    let (_, w) = rows_cols(self.shape(p));
                    self.acc(grads, p, |buf| {
                        for i in 0..r {
                            for j in 0..w {
                                buf[i * w + j] += g[i * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows { x: a, start } => {
                let (_, c) = rows_cols(self.shape(*a));
                self.acc(grads, *a, |buf| {
                    for (x, gi) in buf[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }
            Op::SliceCols { x: a, start } => {
                let (r, c) = rows_cols(self.shape(*a));
                let (_, w) = rows_cols(&node.shape);
                self.acc(grads, *a, |buf| {
                    for i in 0..r {
                        for j in 0..w {
                            buf[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sum(a) => {
                let gs = g[0];
                self.acc(grads, *a, |buf| buf.iter_mut().for_each(|x| *x += gs));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len().max(1) as f64;
                let gs = g[0] / n;
                self.acc(grads, *a, |buf| buf.iter_mut().for_each(|x| *x += gs));
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let c = self.shape(*logits)[1];
                let gs = g[0] / count;
                self.acc(grads, *logits, |buf| {
                    for (i, (brow, prow)) in buf.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        let t = targets[i];
                        if t == *ignore {
                            continue;
                        }
                        for (x, p) in brow.iter_mut().zip(prow) {
                            *x += gs * p;
                        }
                        brow[t] -= gs;
                    }
                });
            }
        }
    }
}
