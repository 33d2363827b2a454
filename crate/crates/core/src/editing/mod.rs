//! Knowledge edits.
//!
//! Two editors share one outcome type. [`finetune_edit`] runs plain
//! full-batch gradient descent on the edit set, the same process the NTK
//! harness analyses. [`rank_one_edit`] is a single-layer locate-then-edit
//! update: find the down-projection carrying most gradient mass, optimise
//! that layer's output at the subject position, then write the result into
//! the weight with a rank-one correction.
//!
//! Weights are stored `[in, out]` and activations are rows, so the
//! down-projection computes `k·W` and the update is
//! `W ← W + k (v − k·W)ᵀ / (k·k)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::gradsim::knowledge_gradient;
use crate::models::{
    lm_logprob, logprob_graph, lm_loss_grad, mlp_loss_grad, optimize, sample_generate, Dataset, Heads, LmExample,
    Model, ModelConfig, ParamFilter, Patch, Sampling, TrainConfig,
};
use crate::ntk::{auto_ntk_rate, EtaMode};

/// Gradient-ascent budget for the target value vector.
pub const VALUE_STEPS: usize = 50;
pub const VALUE_RATE: f64 = 0.1;
/// Keys shorter than this cannot carry a rank-one update.
pub const MIN_KEY_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMethod {
    Finetune,
    RankOne,
}

/// A fixed step size or one derived from the empirical NTK at the start
/// of the edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRate {
    Fixed(f64),
    Mode(EtaMode),
}

impl Default for LearningRate {
    fn default() -> Self {
        LearningRate::Fixed(DEFAULT_RATE)
    }
}

const DEFAULT_STEPS: usize = 100;
const DEFAULT_RATE: f64 = 0.01;

fn default_steps() -> usize {
    DEFAULT_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub method: EditMethod,
    /// Finetune only; the rank-one editor has its own fixed budget.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub learning_rate: LearningRate,
    #[serde(default)]
    pub params: ParamFilter,
}

impl EditConfig {
    pub fn finetune(steps: usize, learning_rate: f64) -> Self {
        Self {
            method: EditMethod::Finetune,
            steps,
            learning_rate: LearningRate::Fixed(learning_rate),
            params: ParamFilter::All,
        }
    }

    pub fn rank_one() -> Self {
        Self {
            method: EditMethod::RankOne,
            steps: DEFAULT_STEPS,
            learning_rate: LearningRate::default(),
            params: ParamFilter::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == EditMethod::Finetune && self.steps == 0 {
            return Err(Error::InvalidConfig("finetune edits need steps ≥ 1".into()));
        }
        if let LearningRate::Fixed(eta) = self.learning_rate {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::InvalidConfig(format!("learning rate must be finite and ≥ 0, got {eta}")));
            }
        }
        Ok(())
    }
}

/// One fact to rewrite: `query` should be answered by `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub query: Vec<usize>,
    /// Index of the last subject token in `query`.
    pub subject_pos: usize,
    pub target: Vec<usize>,
}

impl EditRequest {
    fn validate(&self) -> Result<()> {
        if self.query.is_empty() || self.target.is_empty() {
            return Err(Error::InvalidInput("edit needs a query and a target".into()));
        }
        if self.subject_pos >= self.query.len() {
            return Err(Error::InvalidInput(format!(
                "subject position {} outside a {}-token query",
                self.subject_pos,
                self.query.len()
            )));
        }
        Ok(())
    }
}

/// Key and value written by a rank-one edit.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneVectors {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub model: Model,
    /// Summed `log P(target | query)` over the edit set; `None` for the
    /// regression MLP.
    pub pre_logprob: Option<f64>,
    pub post_logprob: Option<f64>,
    pub layer: Option<usize>,
    pub steps: usize,
    /// Edit loss before each step: the training objective for finetune,
    /// `−log P(target | query)` under the patched value for rank-one.
    pub loss_curve: Vec<f64>,
    pub vectors: Option<RankOneVectors>,
}

fn total_logprob(model: &Model, examples: &[LmExample]) -> Result<f64> {
    examples.iter().map(|e| lm_logprob(model, &e.query, &e.answer)).sum()
}

/// Exactly `steps` full-batch GD updates on the edit set, touching only
/// the parameters selected by `cfg.params`. The input model is not
/// modified.
pub fn finetune_edit(model: &Model, edit_set: &Dataset, cfg: &EditConfig) -> Result<EditOutcome> {
    cfg.validate()?;
    if cfg.method != EditMethod::Finetune {
        return Err(Error::InvalidConfig("finetune_edit called with a rank-one config".into()));
    }
    let trainable = model.select(&cfg.params)?;
    let eta = match (cfg.learning_rate, edit_set) {
        (LearningRate::Fixed(eta), _) => eta,
        (LearningRate::Mode(EtaMode::AutoNtk), Dataset::Regression(r)) => auto_ntk_rate(model, r)?,
        (LearningRate::Mode(EtaMode::AutoNtk), Dataset::Lm(_)) => {
            return Err(Error::UnsupportedModel("auto-ntk learning rate needs the MLP"))
        }
    };
    let mut train = TrainConfig::gd(cfg.steps, eta);
    train.params = cfg.params.clone();
    let (edited, curve, pre, post) = match (model.config(), edit_set) {
        (ModelConfig::Mlp(_), Dataset::Regression(r)) => {
            if r.is_empty() {
                return Err(Error::InvalidInput("empty edit set".into()));
            }
            let (m, curve) = optimize(model, &train, |m| mlp_loss_grad(m, r, Heads::F, &trainable))?;
            (m, curve, None, None)
        }
        (ModelConfig::Lm(_), Dataset::Lm(ex)) => {
            if ex.is_empty() {
                return Err(Error::InvalidInput("empty edit set".into()));
            }
            let pre = total_logprob(model, ex)?;
            let (m, curve) = optimize(model, &train, |m| lm_loss_grad(m, ex, &trainable))?;
            let post = total_logprob(&m, ex)?;
            (m, curve, Some(pre), Some(post))
        }
        _ => return Err(Error::InvalidInput("edit set kind does not match the model".into())),
    };
    Ok(EditOutcome {
        model: edited,
        pre_logprob: pre,
        post_logprob: post,
        layer: None,
        steps: curve.len(),
        loss_curve: curve,
        vectors: None,
    })
}

/// Down-projection layer whose slice of `∇ log P(answer | query)` has the
/// largest L1 norm; the lowest index wins ties.
pub fn locate_layer(model: &Model, query: &[usize], answer: &[usize]) -> Result<usize> {
    Ok(rank_layers(model, query, answer)?[0])
}

/// All down-projection layers, largest gradient L1 mass first, ties by
/// index.
fn rank_layers(model: &Model, query: &[usize], answer: &[usize]) -> Result<Vec<usize>> {
    model.lm_config()?;
    let g = knowledge_gradient(model, query, answer, &ParamFilter::DownProj)?;
    let mut mass = Vec::with_capacity(model.down_proj().len());
    for name in model.down_proj() {
        let slice = g.slice(name).ok_or_else(|| Error::InvalidInput(format!("missing gradient for `{name}`")))?;
        mass.push(slice.iter().map(|v| v.abs()).sum::<f64>());
    }
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    Ok(order)
}

/// `W + k (v − k·W)ᵀ / (k·k)` for `W` of shape `[len(k), len(v)]`.
pub fn rank_one_update(w: &Tensor, key: &[f64], value: &[f64]) -> Result<Tensor> {
    let (rows, cols) = w.dims2()?;
    if key.len() != rows || value.len() != cols {
        return Err(Error::InvalidInput(format!(
            "rank-one update of a {rows}×{cols} weight with key {} and value {}",
            key.len(),
            value.len()
        )));
    }
    let kk: f64 = key.iter().map(|k| k * k).sum();
    if kk.sqrt() < MIN_KEY_NORM {
        return Err(Error::DegenerateKey(kk.sqrt()));
    }
    let mut residual = value.to_vec();
    for (r, k) in key.iter().enumerate() {
        if *k != 0.0 {
            residual.iter_mut().zip(w.row(r)).for_each(|(res, wv)| *res -= k * wv);
        }
    }
    let mut out = w.clone();
    let data = out.data_mut();
    for (r, k) in key.iter().enumerate() {
        let s = k / kk;
        for (c, res) in residual.iter().enumerate() {
            data[r * cols + c] += s * res;
        }
    }
    Ok(out)
}

/// MLP key of every layer at the subject position.
fn subject_keys(model: &Model, req: &EditRequest) -> Result<Vec<Vec<f64>>> {
    let c = model.lm_config()?;
    let mut g = Graph::with_params(model.params(), |_| false);
    let (_, trace) = logprob_graph(&mut g, c, &req.query, &req.target, None)?;
    Ok(trace.mlp_keys.iter().map(|&k| g.value(k).row(req.subject_pos).to_vec()).collect())
}

/// The value that maximises `log P(target | query)` when patched into
/// layer `layer`'s MLP output at the subject position.
fn solve_value(model: &Model, req: &EditRequest, layer: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = model.lm_config()?;
    let mut g = Graph::with_params(model.params(), |_| false);
    let (_, trace) = logprob_graph(&mut g, c, &req.query, &req.target, None)?;
    let mut value = g.value(trace.mlp_outputs[layer]).row(req.subject_pos).to_vec();
    drop(g);

    let mut curve = Vec::with_capacity(VALUE_STEPS);
    for step in 0..VALUE_STEPS {
        let mut g = Graph::with_params(model.params(), |_| false);
        let v = g.bind("edit.value", Tensor::vector(value.clone()).with_grad(true))?;
        let patch = Patch {
            layer,
            position: req.subject_pos,
            value: v,
        };
        let (lp, _) = logprob_graph(&mut g, c, &req.query, &req.target, Some(patch))?;
        let lp_value = g.value(lp).item();
        if !lp_value.is_finite() {
            return Err(Error::Divergence { step, loss: -lp_value });
        }
        curve.push(-lp_value);
        let grad = g.grad_of(lp, v)?;
        value.iter_mut().zip(&grad).for_each(|(x, d)| *x += VALUE_RATE * d);
    }
    Ok((value, curve))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Locates the layer for `(query, target)`, solves for the key and value,
/// and rewrites that layer's down-projection. Nothing else changes.
///
/// A layer whose MLP is entirely inactive at the subject position has a
/// zero key and cannot store anything there; the next layer by gradient
/// mass is used instead.
pub fn rank_one_edit(model: &Model, req: &EditRequest) -> Result<EditOutcome> {
    req.validate()?;
    let keys = subject_keys(model, req)?;
    let order = rank_layers(model, &req.query, &req.target)?;
    let layer = *order
        .iter()
        .find(|&&l| norm(&keys[l]) >= MIN_KEY_NORM)
        .ok_or_else(|| Error::DegenerateKey(norm(&keys[order[0]])))?;
    let (value, curve) = solve_value(model, req, layer)?;
    let vectors = RankOneVectors {
        key: keys[layer].clone(),
        value,
    };
    let name = model.down_proj()[layer].clone();
    let w = model.params().get(&name).expect("down-projection exists");
    let updated = rank_one_update(w, &vectors.key, &vectors.value)?;
    let mut edited = model.clone();
    *edited.params_mut().get_mut(&name).expect("down-projection exists") = updated;
    Ok(EditOutcome {
        pre_logprob: Some(lm_logprob(model, &req.query, &req.target)?),
        post_logprob: Some(lm_logprob(&edited, &req.query, &req.target)?),
        model: edited,
        layer: Some(layer),
        steps: VALUE_STEPS,
        loss_curve: curve,
        vectors: Some(vectors),
    })
}

/// Runs the configured editor on a single request.
pub fn apply_edit(model: &Model, req: &EditRequest, cfg: &EditConfig) -> Result<EditOutcome> {
    cfg.validate()?;
    req.validate()?;
    match cfg.method {
        EditMethod::Finetune => {
            let set = Dataset::Lm(vec![LmExample {
                query: req.query.clone(),
                answer: req.target.clone(),
            }]);
            finetune_edit(model, &set, cfg)
        }
        EditMethod::RankOne => rank_one_edit(model, req),
    }
}

/// Greedy decoding after `query` starts with `target`.
pub fn edit_succeeded(model: &Model, query: &[usize], target: &[usize]) -> Result<bool> {
    let out = sample_generate(model, query, Sampling::Greedy, target.len(), 0)?;
    Ok(out.as_slice() == target)
}

#[cfg(test)]
mod tests;
