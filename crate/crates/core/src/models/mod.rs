//! Parameter-housing architectures.
//!
//! Two model families share the [`Model`] container:
//!
//! - a two-head MLP in NTK parameterization, whose heads `f` and `f′` read
//!   out from one shared trunk, used by the width-scan harness;
//! - a small pre-norm decoder-only transformer over the synthetic fact
//!   vocabulary, used for knowledge editing and gradient similarity.

mod checkpoint;
mod lm;
mod mlp;
mod train;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Params, Tensor};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use lm::{lm_logprob, next_token_logprobs, sample_generate, LmExample, Sampling};
pub(crate) use lm::{lm_graph, logprob_graph, Patch};
pub use mlp::{mlp_forward, Head};
pub(crate) use mlp::head_graph;
pub use train::{train, Dataset, Heads, Optimizer, RegressionSet, TrainConfig};
pub(crate) use train::{lm_loss_grad, mlp_loss_grad, optimize};

/// Token id reserved for end-of-sequence in every vocabulary.
pub const EOS: usize = 0;

const LM_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    #[serde(default = "two")]
    pub heads: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "ntk")]
    pub parameterization: String,
}

fn two() -> usize {
    2
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn ntk() -> String {
    "ntk".into()
}

impl MlpConfig {
    pub fn new(input_dim: usize, width: usize, depth: usize) -> Self {
        Self {
            input_dim,
            width,
            depth,
            heads: 2,
            activation: Activation::Tanh,
            parameterization: ntk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::InvalidConfig("mlp input_dim, width and depth must be ≥ 1".into()));
        }
        if self.heads != 2 {
            return Err(Error::InvalidConfig(format!("mlp needs exactly 2 heads, got {}", self.heads)));
        }
        if self.parameterization != "ntk" {
            return Err(Error::InvalidConfig(format!(
                "unsupported parameterization `{}`",
                self.parameterization
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
        ];
        if fields.contains(&0) {
            return Err(Error::InvalidConfig("lm dimensions must all be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers > 4 || self.d_model > 256 {
            return Err(Error::InvalidConfig("lm is limited to 4 layers and d_model 256".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Mlp(MlpConfig),
    Lm(LmConfig),
}

/// A named group of parameters, such as one transformer block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub params: Vec<String>,
}

/// Selects the parameters a gradient or an update is restricted to.
///
/// Textual forms: `all`, `down-proj`, `prefix:<p>`, `names:<a>,<b>`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ParamFilter {
    #[default]
    All,
    DownProj,
    Prefix(String),
    Names(Vec<String>),
}

impl FromStr for ParamFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "down-proj" => Ok(Self::DownProj),
            _ => {
                if let Some(p) = s.strip_prefix("prefix:") {
                    Ok(Self::Prefix(p.to_string()))
                } else if let Some(list) = s.strip_prefix("names:") {
                    Ok(Self::Names(list.split(',').map(str::to_string).collect()))
                } else {
                    Err(Error::InvalidConfig(format!("unknown parameter filter `{s}`")))
                }
            }
        }
    }
}

impl TryFrom<String> for ParamFilter {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ParamFilter> for String {
    fn from(f: ParamFilter) -> String {
        f.to_string()
    }
}

impl fmt::Display for ParamFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => write!(f, "all"),
            Self::DownProj => write!(f, "down-proj"),
            Self::Prefix(p) => write!(f, "prefix:{p}"),
            Self::Names(n) => write!(f, "names:{}", n.join(",")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    layers: Vec<Layer>,
    down_proj: Vec<String>,
}

impl Model {
    /// Assembles a model from existing parameters, checking that they match
    /// the architecture exactly.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        let template = match &config {
            ModelConfig::Mlp(c) => {
                c.validate()?;
                mlp::param_shapes(c)
            }
            ModelConfig::Lm(c) => {
                c.validate()?;
                lm::param_shapes(c)
            }
        };
        if template.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameter tensors, found {}",
                template.len(),
                params.len()
            )));
        }
        for (name, shape) in &template {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::InvalidInput(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::InvalidInput(format!("missing parameter `{name}`"))),
            }
        }
        let (layers, down_proj) = match &config {
            ModelConfig::Mlp(c) => (mlp::layers(c), Vec::new()),
            ModelConfig::Lm(c) => (lm::layers(c), lm::down_proj_names(c)),
        };
        Ok(Self {
            config,
            params,
            layers,
            down_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mlp_config(&self) -> Result<&MlpConfig> {
        match &self.config {
            ModelConfig::Mlp(c) => Ok(c),
            ModelConfig::Lm(_) => Err(Error::UnsupportedModel("operation needs an MLP")),
        }
    }

    pub fn lm_config(&self) -> Result<&LmConfig> {
        match &self.config {
            ModelConfig::Lm(c) => Ok(c),
            ModelConfig::Mlp(_) => Err(Error::UnsupportedModel("operation needs a transformer LM")),
        }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Replaces the parameters, keeping the architecture.
    pub fn with_params(&self, params: Params) -> Result<Self> {
        Self::from_params(self.config.clone(), params)
    }

    /// Mutable access for surgical edits; shapes must be preserved.
    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Down-projection weight names, one per transformer block (empty for
    /// the MLP).
    pub fn down_proj(&self) -> &[String] {
        &self.down_proj
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Width used for tangent-kernel normalisation: hidden width for the
    /// MLP, `d_model` for the transformer.
    pub fn width(&self) -> usize {
        match &self.config {
            ModelConfig::Mlp(c) => c.width,
            ModelConfig::Lm(c) => c.d_model,
        }
    }

    /// Parameter names accepted by `filter`; never empty.
    pub fn select(&self, filter: &ParamFilter) -> Result<BTreeSet<String>> {
        let names: BTreeSet<String> = match filter {
            ParamFilter::All => self.params.names().map(str::to_string).collect(),
            ParamFilter::DownProj => self.down_proj.iter().cloned().collect(),
            ParamFilter::Prefix(p) => self.params.names().filter(|n| n.starts_with(p.as_str())).map(str::to_string).collect(),
            ParamFilter::Names(list) => {
                for n in list {
                    if self.params.get(n).is_none() {
                        return Err(Error::InvalidConfig(format!("filter names unknown parameter `{n}`")));
                    }
                }
                list.iter().cloned().collect()
            }
        };
        if names.is_empty() {
            return Err(Error::InvalidConfig(format!("filter `{filter}` selects no parameters")));
        }
        Ok(names)
    }

    /// Layers restricted to the parameters in `selected`, dropping layers
    /// that end up empty.
    pub fn layers_within(&self, selected: &BTreeSet<String>) -> Vec<Layer> {
        self.layers
            .iter()
            .filter_map(|l| {
                let params: Vec<String> = l.params.iter().filter(|p| selected.contains(*p)).cloned().collect();
                (!params.is_empty()).then(|| Layer {
                    name: l.name.clone(),
                    params,
                })
            })
            .collect()
    }
}

/// Samples initial parameters: unit normal for the NTK MLP, `N(0, 0.02²)`
/// weights with unit layer-norm gains and zero biases for the transformer.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = match config {
        ModelConfig::Mlp(c) => {
            c.validate()?;
            mlp::param_shapes(c)
        }
        ModelConfig::Lm(c) => {
            c.validate()?;
            lm::param_shapes(c)
        }
    };
    let mut params = Params::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match config {
            ModelConfig::Mlp(_) => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
            ModelConfig::Lm(_) if name.ends_with(".gain") => vec![1.0; n],
            ModelConfig::Lm(_) if name.ends_with("bias") => vec![0.0; n],
            ModelConfig::Lm(_) => (0..n)
                .map(|_| LM_INIT_STD * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect(),
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    Model::from_params(config.clone(), params)
}

#[cfg(test)]
mod tests;
