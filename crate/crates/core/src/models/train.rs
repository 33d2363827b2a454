//! Full-batch training.
//!
//! The MLP objective is `½ Σ_heads ‖f_h(X) − Z‖²`, so plain GD with step `η`
//! is exactly `θ ← θ − (η/2) ∇‖f(X) − Z‖²`. The LM objective is the mean over
//! examples of the summed cross-entropy of `answer ++ [EOS]`.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lm::{lm_graph, LmExample};
use super::mlp::{check_inputs, head_graph, Head};
use super::{Model, ModelConfig, ParamFilter, EOS};
use crate::autodiff::{Graph, GradientVector, GraphError, Reduction, Tensor};
use crate::error::{Error, Result};

const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Gd,
    /// Only meant for LM pretraining.
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }
}

/// Which MLP heads the squared loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heads {
    #[default]
    F,
    #[serde(rename = "f_prime")]
    FPrime,
    Both,
}

impl Heads {
    fn list(self) -> &'static [Head] {
        match self {
            Heads::F => &[Head::F],
            Heads::FPrime => &[Head::FPrime],
            Heads::Both => &[Head::F, Head::FPrime],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default = "gd")]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub seed: u64,
    /// MLP only.
    #[serde(default)]
    pub heads: Heads,
    #[serde(default)]
    pub params: ParamFilter,
    /// Stop once the loss is at or below this value (the curve then ends
    /// with that loss).
    #[serde(default)]
    pub stop_loss: Option<f64>,
}

fn gd() -> Optimizer {
    Optimizer::Gd
}

impl TrainConfig {
    pub fn gd(steps: usize, learning_rate: f64) -> Self {
        Self {
            steps,
            learning_rate,
            optimizer: Optimizer::Gd,
            seed: 0,
            heads: Heads::F,
            params: ParamFilter::All,
            stop_loss: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Regression data shared by the selected heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSet {
    pub inputs: Tensor,
    pub targets: Vec<f64>,
}

impl RegressionSet {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::InvalidInput(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self {
            inputs: Tensor::from_rows(&inputs)?,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Rejects sets where one input maps to two different targets.
    pub fn check_mapping(&self) -> Result<()> {
        let mut seen: HashMap<Vec<u64>, u64> = HashMap::new();
        for (i, &z) in self.targets.iter().enumerate() {
            let key: Vec<u64> = self.inputs.row(i).iter().map(|v| v.to_bits()).collect();
            if let Some(prev) = seen.insert(key, z.to_bits()) {
                if prev != z.to_bits() {
                    return Err(Error::InvalidInput(format!("input {i} repeats an earlier input with a different target")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Regression(RegressionSet),
    Lm(Vec<LmExample>),
}

impl Dataset {
    fn check(&self) -> Result<()> {
        match self {
            Dataset::Regression(r) => {
                if r.is_empty() {
                    return Err(Error::InvalidInput("empty dataset".into()));
                }
                r.check_mapping()
            }
            Dataset::Lm(ex) => {
                if ex.is_empty() {
                    return Err(Error::InvalidInput("empty dataset".into()));
                }
                let mut seen: HashMap<&[usize], &[usize]> = HashMap::new();
                for (i, e) in ex.iter().enumerate() {
                    if let Some(prev) = seen.insert(&e.query, &e.answer) {
                        if prev != e.answer.as_slice() {
                            return Err(Error::InvalidInput(format!(
                                "example {i} repeats an earlier query with a different answer"
                            )));
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

/// `½ Σ_heads ‖f_h(X) − Z‖²` and its gradient over `trainable`.
pub(crate) fn mlp_loss_grad(
    model: &Model,
    data: &RegressionSet,
    heads: Heads,
    trainable: &BTreeSet<String>,
) -> Result<(f64, GradientVector)> {
    let c = model.mlp_config()?;
    check_inputs(c, &data.inputs)?;
    let mut g = Graph::with_params(model.params(), |n| trainable.contains(n));
    let x = g.constant(data.inputs.clone())?;
    let z = g.constant(Tensor::new(vec![data.len(), 1], data.targets.clone())?)?;
    let mut total = None;
    for &h in heads.list() {
        let out = head_graph(&mut g, c, x, h)?;
        let se = g.squared_error(out, z)?;
        total = Some(match total {
            None => se,
            Some(t) => g.add(t, se)?,
        });
    }
    let total = total.expect("at least one head");
    let loss = g.scale(total, 0.5)?;
    Ok((g.value(loss).item(), g.backward(loss)?))
}

fn example_loss_grad(
    model: &Model,
    e: &LmExample,
    trainable: &BTreeSet<String>,
) -> Result<(f64, GradientVector)> {
    let c = model.lm_config()?;
    if e.query.is_empty() || e.answer.is_empty() {
        return Err(Error::InvalidInput("training examples need a query and an answer".into()));
    }
    let mut tokens = e.query.clone();
    tokens.extend_from_slice(&e.answer);
    let rows: Vec<usize> = (e.query.len() - 1..tokens.len()).collect();
    let mut targets: Vec<Option<usize>> = e.answer.iter().map(|&t| Some(t)).collect();
    targets.push(Some(EOS));
    let mut g = Graph::with_params(model.params(), |n| trainable.contains(n));
    let trace = lm_graph(&mut g, c, &tokens, &rows, None)?;
    let ce = g.cross_entropy(trace.logits, &targets, Reduction::Sum)?;
    Ok((g.value(ce).item(), g.backward(ce)?))
}

/// Mean over examples of the summed answer+EOS cross-entropy. Per-example
/// gradients may be computed in parallel but are summed in example order.
pub(crate) fn lm_loss_grad(
    model: &Model,
    examples: &[LmExample],
    trainable: &BTreeSet<String>,
) -> Result<(f64, GradientVector)> {
    let parts: Vec<(f64, GradientVector)> = examples
        .par_iter()
        .map(|e| example_loss_grad(model, e, trainable))
        .collect::<Result<_>>()?;
    let scale = 1.0 / examples.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, first) = iter.next().ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
    let layout = first.layout().to_vec();
    let mut acc = first.entries().to_vec();
    for (l, gv) in iter {
        loss += l;
        acc.iter_mut().zip(gv.entries()).for_each(|(a, b)| *a += b);
    }
    acc.iter_mut().for_each(|a| *a *= scale);
    Ok((loss * scale, GradientVector::new(acc, layout)?))
}

/// Runs `steps` optimizer updates, recording the loss before each update.
pub(crate) fn optimize(
    model: &Model,
    cfg: &TrainConfig,
    mut loss_grad: impl FnMut(&Model) -> Result<(f64, GradientVector)>,
) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    let mut current = model.clone();
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut adam: Option<(Vec<f64>, Vec<f64>)> = None;
    for step in 0..cfg.steps {
        let (loss, grad) = loss_grad(&current).map_err(|e| match e {
            Error::Graph(GraphError::NonFinite(_)) => Error::Divergence { step, loss: f64::NAN },
            other => other,
        })?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step, loss });
        }
        curve.push(loss);
        if cfg.stop_loss.is_some_and(|s| loss <= s) {
            break;
        }
        let update = match cfg.optimizer {
            Optimizer::Gd => grad.scaled(-cfg.learning_rate),
            Optimizer::Adam { beta1, beta2, eps } => {
                let (m, v) = adam.get_or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                let t = (step + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                let mut delta = Vec::with_capacity(grad.len());
                for (i, &gi) in grad.entries().iter().enumerate() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    delta.push(-cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps));
                }
                GradientVector::new(delta, grad.layout().to_vec())?
            }
        };
        current.params_mut().add_scaled(&update, 1.0)?;
    }
    Ok((current, curve))
}

/// Trains a copy of `model`; the input model is never modified.
pub fn train(model: &Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    dataset.check()?;
    let trainable = model.select(&cfg.params)?;
    match (model.config(), dataset) {
        (ModelConfig::Mlp(_), Dataset::Regression(r)) => {
            optimize(model, cfg, |m| mlp_loss_grad(m, r, cfg.heads, &trainable))
        }
        (ModelConfig::Lm(_), Dataset::Lm(ex)) => optimize(model, cfg, |m| lm_loss_grad(m, ex, &trainable)),
        _ => Err(Error::InvalidInput("dataset kind does not match the model".into())),
    }
}
