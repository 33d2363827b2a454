//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are built by running the model code: each op evaluates eagerly and
//! records itself, and [`Graph::backward`] walks the record in reverse. Every
//! gradient used elsewhere in the crate (training, knowledge gradients,
//! Jacobians for the tangent kernel) comes from here, and
//! [`finite_difference_gradient`] is the independent oracle the tests hold it
//! against.

mod graph;
mod tensor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{Graph, Reduction, Var};
#[allow(unused_imports)]
pub(crate) use graph::{log_sum_exp, softmax_in_place};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("leaf `{0}` is bound twice")]
    DuplicateLeaf(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("gradient layouts differ")]
    LayoutMismatch,
    #[error("finite differences need eps > 0, got {0}")]
    InvalidEpsilon(f64),
    #[error("loss is non-finite at a perturbed point of `{0}`")]
    NonFiniteLoss(String),
}

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.0.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// `θ ← θ + scale · g` for every tensor named in the gradient layout.
    pub fn add_scaled(&mut self, g: &GradientVector, scale: f64) -> Result<(), GraphError> {
        for entry in g.layout() {
            let t = self
                .0
                .get_mut(&entry.name)
                .ok_or_else(|| GraphError::UnboundLeaf(entry.name.clone()))?;
            if t.numel() != entry.len {
                return Err(GraphError::LayoutMismatch);
            }
            let src = &g.entries()[entry.offset..entry.offset + entry.len];
            t.data_mut().iter_mut().zip(src).for_each(|(p, d)| *p += scale * d);
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flattened gradient with its per-parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    entries: Vec<f64>,
    layout: Vec<LayoutEntry>,
}

impl GradientVector {
    pub fn new(entries: Vec<f64>, layout: Vec<LayoutEntry>) -> Result<Self, GraphError> {
        let mut offset = 0;
        for (i, e) in layout.iter().enumerate() {
            if e.offset != offset || (i > 0 && layout[i - 1].name >= e.name) {
                return Err(GraphError::LayoutMismatch);
            }
            offset += e.len;
        }
        if offset != entries.len() {
            return Err(GraphError::LayoutMismatch);
        }
        Ok(Self { entries, layout })
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.entries[e.offset..e.offset + e.len])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layout == other.layout
    }

    pub fn dot(&self, other: &Self) -> Result<f64, GraphError> {
        if !self.same_layout(other) {
            return Err(GraphError::LayoutMismatch);
        }
        Ok(self.entries.iter().zip(&other.entries).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|v| v.abs()).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|v| v * c).collect(),
            layout: self.layout.clone(),
        }
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self, GraphError> {
        if !self.same_layout(other) {
            return Err(GraphError::LayoutMismatch);
        }
        Ok(Self {
            entries: self.entries.iter().zip(&other.entries).map(|(x, y)| a * x + b * y).collect(),
            layout: self.layout.clone(),
        })
    }

    /// Keeps only the parameters accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        let mut entries = Vec::new();
        let mut layout = Vec::new();
        for e in self.layout.iter().filter(|e| keep(&e.name)) {
            layout.push(LayoutEntry {
                name: e.name.clone(),
                offset: entries.len(),
                len: e.len,
            });
            entries.extend_from_slice(&self.entries[e.offset..e.offset + e.len]);
        }
        Self { entries, layout }
    }
}

/// Central-difference gradient of `loss` over the parameters accepted by
/// `wrt`: `(L(θ+εe_i) − L(θ−εe_i)) / 2ε` per coordinate.
pub fn finite_difference_gradient<E>(
    loss: impl Fn(&Params) -> Result<f64, E>,
    params: &Params,
    wrt: impl Fn(&str) -> bool,
    eps: f64,
) -> Result<GradientVector, GraphError> {
    if !(eps > 0.0) {
        return Err(GraphError::InvalidEpsilon(eps));
    }
    let mut work = params.clone();
    let mut entries = Vec::new();
    let mut layout = Vec::new();
    let names: Vec<String> = params.names().filter(|n| wrt(n)).map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).map_or(0, Tensor::numel);
        layout.push(LayoutEntry {
            name: name.clone(),
            offset: entries.len(),
            len,
        });
        for i in 0..len {
            let orig = work.get(&name).expect("listed above").data()[i];
            let mut eval = |v: f64| -> Result<f64, GraphError> {
                work.get_mut(&name).expect("listed above").data_mut()[i] = v;
                match loss(&work) {
                    Ok(l) if l.is_finite() => Ok(l),
                    _ => Err(GraphError::NonFiniteLoss(name.clone())),
                }
            };
            let plus = eval(orig + eps)?;
            let minus = eval(orig - eps)?;
            work.get_mut(&name).expect("listed above").data_mut()[i] = orig;
            entries.push((plus - minus) / (2.0 * eps));
        }
    }
    GradientVector::new(entries, layout)
}
