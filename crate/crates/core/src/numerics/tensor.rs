use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Result};

/// A dense row-major `f64` array that may carry a gradient buffer.
///
/// Every trainable parameter in the crate is a `DiffTensor` held by a
/// [`ParamStore`]; activations live on a [`Tape`](super::Tape).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl DiffTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(invalid(
                "DiffTensor::new",
                alloc::format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: true,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: true,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
            requires_grad: true,
            grad: None,
        }
    }

    /// Uniform initialisation on `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self {
            shape,
            data,
            requires_grad: true,
            grad: None,
        }
    }

    /// Glorot/Xavier uniform initialisation for a `fan_in x fan_out` matrix.
    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        Self::uniform(vec![fan_in, fan_out], bound, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameters.
///
/// Insertion order is preserved, which makes checkpoint bytes reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<DiffTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DiffTensor) -> ParamId {
        let name = name.into();
        if let Some(id) = self.id_of(&name) {
            self.tensors[id.0] = tensor;
            return id;
        }
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id_of(name)
            .ok_or_else(|| invalid("ParamStore::require", alloc::format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &DiffTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffTensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffTensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(DiffTensor::zero_grad);
    }

    /// Sets `requires_grad` on every parameter to `pred(name)`.
    pub fn set_trainable(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            t.requires_grad = pred(name);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).requires_grad).collect()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        self.tensors[id.0].accumulate_grad(g);
    }

    /// Global L2 norm of the gradients of `ids` (missing gradients count as zero).
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        let sq: f64 = ids
            .iter()
            .filter_map(|&id| self.get(id).grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum();
        libm::sqrt(sq)
    }

    /// Rescales gradients so that their global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, ids: &[ParamId], max_norm: f64) -> f64 {
        let norm = self.grad_norm(ids);
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for &id in ids {
                if let Some(g) = self.tensors[id.0].grad.as_mut() {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        norm
    }
}
