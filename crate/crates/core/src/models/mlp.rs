//! Two-head MLP in NTK parameterization.
//!
//! `h_0 = x`, `h_{l+1} = φ(h_l W_l / √fan_in)`, `f_k = h_L v_k / √width`.
//! Parameters are drawn from a unit normal; the `1/√fan_in` factors live in
//! the forward pass.

use serde::{Deserialize, Serialize};

use super::{Activation, Layer, MlpConfig, Model};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Readout head: `F` is the edited function `f`, `FPrime` the ripple probe `f′`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    #[serde(rename = "f")]
    F,
    #[serde(rename = "f_prime")]
    FPrime,
}

impl Head {
    pub fn index(self) -> usize {
        match self {
            Head::F => 0,
            Head::FPrime => 1,
        }
    }

    pub fn param_name(self) -> &'static str {
        match self {
            Head::F => "head0.weight",
            Head::FPrime => "head1.weight",
        }
    }
}

pub(super) fn param_shapes(c: &MlpConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut fan_in = c.input_dim;
    for l in 0..c.depth {
        out.push((format!("layer{l}.weight"), vec![fan_in, c.width]));
        fan_in = c.width;
    }
    out.push(("head0.weight".into(), vec![c.width, 1]));
    out.push(("head1.weight".into(), vec![c.width, 1]));
    out
}

pub(super) fn layers(c: &MlpConfig) -> Vec<Layer> {
    let mut out: Vec<Layer> = (0..c.depth)
        .map(|l| Layer {
            name: format!("layer{l}"),
            params: vec![format!("layer{l}.weight")],
        })
        .collect();
    for h in [Head::F, Head::FPrime] {
        out.push(Layer {
            name: h.param_name().trim_end_matches(".weight").to_string(),
            params: vec![h.param_name().to_string()],
        });
    }
    out
}

/// Shared trunk output `h_L`, shape `[batch, width]`.
fn trunk(g: &mut Graph<'_>, c: &MlpConfig, x: Var) -> Result<Var> {
    let mut h = x;
    let mut fan_in = c.input_dim;
    for l in 0..c.depth {
        let w = g.leaf(&format!("layer{l}.weight"))?;
        let z = g.matmul(h, w)?;
        let z = g.scale(z, 1.0 / (fan_in as f64).sqrt())?;
        h = match c.activation {
            Activation::Tanh => g.tanh(z)?,
            Activation::Relu => g.relu(z)?,
        };
        fan_in = c.width;
    }
    Ok(h)
}

/// One head's output, shape `[batch, 1]`.
pub(crate) fn head_graph(g: &mut Graph<'_>, c: &MlpConfig, x: Var, head: Head) -> Result<Var> {
    let h = trunk(g, c, x)?;
    readout(g, c, h, head)
}

fn readout(g: &mut Graph<'_>, c: &MlpConfig, h: Var, head: Head) -> Result<Var> {
    let v = g.leaf(head.param_name())?;
    let o = g.matmul(h, v)?;
    Ok(g.scale(o, 1.0 / (c.width as f64).sqrt())?)
}

/// Both heads, shape `[batch, 2]` with column 0 = `f`, column 1 = `f′`.
pub(crate) fn mlp_graph(g: &mut Graph<'_>, c: &MlpConfig, x: Var) -> Result<Var> {
    let h = trunk(g, c, x)?;
    let f = readout(g, c, h, Head::F)?;
    let fp = readout(g, c, h, Head::FPrime)?;
    Ok(g.concat_cols(&[f, fp])?)
}

pub(crate) fn check_inputs(c: &MlpConfig, inputs: &Tensor) -> Result<()> {
    match inputs.shape() {
        [b, d] if *b > 0 && *d == c.input_dim => Ok(()),
        s => Err(Error::InvalidInput(format!(
            "mlp inputs must be [batch, {}], got {s:?}",
            c.input_dim
        ))),
    }
}

/// Evaluates both heads on a batch: returns `[batch, 2]`.
pub fn mlp_forward(model: &Model, inputs: &Tensor) -> Result<Tensor> {
    let c = model.mlp_config()?;
    check_inputs(c, inputs)?;
    let mut g = Graph::with_params(model.params(), |_| false);
    let x = g.constant(inputs.clone())?;
    let out = mlp_graph(&mut g, c, x)?;
    Ok(g.value(out).clone())
}
