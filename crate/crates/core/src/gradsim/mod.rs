//! Knowledge gradients and gradient similarity.
//!
//! The knowledge gradient of a fact `(q, a)` is `∇_θ log P_θ(a | q)`. Since
//! `∇P = P · ∇log P` with `P > 0`, its cosine with any other gradient is the
//! same as for `∇P`; [`probability_gradient`] computes the raw-probability
//! form through a separate route so the equivalence can be checked.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientVector, Graph, GraphError, Tensor};
use crate::error::{Error, Result};
use crate::format::{float, opt_float};
use crate::models::{lm_graph, logprob_graph, Layer, Model, ParamFilter};

const MIN_NORM: f64 = 1e-15;

/// `∇_θ log P(a | q)` over the parameters selected by `filter`.
pub fn knowledge_gradient(model: &Model, query: &[usize], answer: &[usize], filter: &ParamFilter) -> Result<GradientVector> {
    let c = model.lm_config()?;
    let selected = model.select(filter)?;
    let mut g = Graph::with_params(model.params(), |n| selected.contains(n));
    let (lp, _) = logprob_graph(&mut g, c, query, answer, None)?;
    Ok(g.backward(lp)?)
}

/// `∇_θ P(a | q)`, built from softmax probabilities and their product rather
/// than from log-softmax.
pub fn probability_gradient(model: &Model, query: &[usize], answer: &[usize], filter: &ParamFilter) -> Result<GradientVector> {
    let c = model.lm_config()?;
    if query.is_empty() || answer.is_empty() {
        return Err(Error::InvalidInput("query and answer must be non-empty".into()));
    }
    let selected = model.select(filter)?;
    let mut g = Graph::with_params(model.params(), |n| selected.contains(n));
    let mut tokens = query.to_vec();
    tokens.extend_from_slice(&answer[..answer.len() - 1]);
    if tokens.len() + 1 > c.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len() + 1,
            max: c.max_seq_len,
        });
    }
    let rows: Vec<usize> = (query.len() - 1..tokens.len()).collect();
    let trace = lm_graph(&mut g, c, &tokens, &rows, None)?;
    let probs = g.softmax(trace.logits)?;
    let mut pick = Tensor::zeros(&[answer.len(), c.vocab_size]);
    for (i, &a) in answer.iter().enumerate() {
        if a >= c.vocab_size {
            return Err(Error::UnknownToken(a));
        }
        pick.data_mut()[i * c.vocab_size + a] = 1.0;
    }
    let pick = g.constant(pick)?;
    let mut total = None;
    for i in 0..answer.len() {
        let row = g.select_rows(probs, &[i])?;
        let mask = g.select_rows(pick, &[i])?;
        let p = g.mul(row, mask)?;
        let p = g.sum(p)?;
        total = Some(match total {
            None => p,
            Some(t) => g.mul(t, p)?,
        });
    }
    Ok(g.backward(total.expect("non-empty answer"))?)
}

fn checked_norm(g: &GradientVector) -> Result<f64> {
    let n = g.norm();
    if n <= MIN_NORM {
        return Err(Error::ZeroNorm);
    }
    Ok(n)
}

/// Cosine similarity of two gradients with the same layout.
pub fn grad_sim(g1: &GradientVector, g2: &GradientVector) -> Result<f64> {
    if !g1.same_layout(g2) {
        return Err(GraphError::LayoutMismatch.into());
    }
    let (n1, n2) = (checked_norm(g1)?, checked_norm(g2)?);
    Ok(g1.dot(g2)? / (n1 * n2))
}

/// Offsets of each layer's slices; fails unless the layers partition the
/// layout exactly.
fn layer_slices(g: &GradientVector, layers: &[Layer]) -> Result<Vec<Vec<(usize, usize)>>> {
    let mut used = vec![false; g.layout().len()];
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let mut slices = Vec::with_capacity(layer.params.len());
        for p in &layer.params {
            let idx = g
                .layout()
                .iter()
                .position(|e| &e.name == p)
                .ok_or_else(|| Error::InvalidInput(format!("layer `{}` names `{p}`, which the gradient lacks", layer.name)))?;
            if used[idx] {
                return Err(Error::InvalidInput(format!("parameter `{p}` appears in two layers")));
            }
            used[idx] = true;
            let e = &g.layout()[idx];
            slices.push((e.offset, e.offset + e.len));
        }
        out.push(slices);
    }
    if let Some(i) = used.iter().position(|u| !u) {
        return Err(Error::InvalidInput(format!(
            "layer map does not cover `{}`",
            g.layout()[i].name
        )));
    }
    Ok(out)
}

/// Per-layer L1 norm of a gradient, in layer order.
pub fn layer_l1_profile(g: &GradientVector, layers: &[Layer]) -> Result<Vec<f64>> {
    let e = g.entries();
    Ok(layer_slices(g, layers)?
        .into_iter()
        .map(|slices| slices.iter().map(|&(a, b)| e[a..b].iter().map(|v| v.abs()).sum::<f64>()).sum())
        .collect())
}

/// Per-layer dot products and squared norms: `(g1·g2, ‖g1‖², ‖g2‖²)`.
pub fn per_layer_terms(g1: &GradientVector, g2: &GradientVector, layers: &[Layer]) -> Result<Vec<(f64, f64, f64)>> {
    if !g1.same_layout(g2) {
        return Err(GraphError::LayoutMismatch.into());
    }
    let (a, b) = (g1.entries(), g2.entries());
    Ok(layer_slices(g1, layers)?
        .into_iter()
        .map(|slices| {
            let mut t = (0.0, 0.0, 0.0);
            for (lo, hi) in slices {
                for i in lo..hi {
                    t.0 += a[i] * b[i];
                    t.1 += a[i] * a[i];
                    t.2 += b[i] * b[i];
                }
            }
            t
        })
        .collect())
}

/// Per-layer cosine; `None` where either slice has zero norm.
pub fn per_layer_gradsim(g1: &GradientVector, g2: &GradientVector, layers: &[Layer]) -> Result<Vec<Option<f64>>> {
    Ok(per_layer_terms(g1, g2, layers)?
        .into_iter()
        .map(|(d, s1, s2)| {
            let (n1, n2) = (s1.sqrt(), s2.sqrt());
            (n1 > MIN_NORM && n2 > MIN_NORM).then(|| d / (n1 * n2))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSimRecord {
    pub x_id: String,
    pub y_id: String,
    pub category: String,
    pub gradsim: f64,
    pub norm_x: f64,
    pub norm_y: f64,
    pub per_layer: Vec<Option<f64>>,
    pub filter: String,
}

impl GradSimRecord {
    pub fn compute(
        x_id: &str,
        y_id: &str,
        category: &str,
        gx: &GradientVector,
        gy: &GradientVector,
        layers: &[Layer],
        filter: &ParamFilter,
    ) -> Result<Self> {
        Ok(Self {
            x_id: x_id.into(),
            y_id: y_id.into(),
            category: category.into(),
            gradsim: grad_sim(gx, gy)?,
            norm_x: gx.norm(),
            norm_y: gy.norm(),
            per_layer: per_layer_gradsim(gx, gy, layers)?,
            filter: filter.to_string(),
        })
    }
}

/// Columns: `x_id, y_id, category, gradsim, norm_x, norm_y`, then one
/// `cos_<layer>` column per layer. Missing per-layer values are empty.
pub fn write_gradsim_csv<W: Write>(records: &[GradSimRecord], layer_names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["x_id", "y_id", "category", "gradsim", "norm_x", "norm_y"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(layer_names.iter().map(|n| format!("cos_{n}")));
    w.write_record(&header)?;
    for r in records {
        if r.per_layer.len() != layer_names.len() {
            return Err(Error::InvalidInput(format!(
                "record {}→{} has {} layer values for {} layers",
                r.x_id,
                r.y_id,
                r.per_layer.len(),
                layer_names.len()
            )));
        }
        let mut row = vec![
            r.x_id.clone(),
            r.y_id.clone(),
            r.category.clone(),
            float(r.gradsim),
            float(r.norm_x),
            float(r.norm_y),
        ];
        row.extend(r.per_layer.iter().map(|v| opt_float(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
