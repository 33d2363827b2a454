//! Tiny pre-norm decoder-only transformer.
//!
//! Token and learned positional embeddings, `n_layers` blocks of causal
//! multi-head attention and a ReLU MLP, a final layer norm and an untied
//! output projection. Activations are row vectors, so every weight is stored
//! `[in, out]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Layer, LmConfig, Model, EOS};
use crate::autodiff::{log_sum_exp, softmax_in_place, Graph, Reduction, Tensor, Var};
use crate::error::{Error, Result};

const MASKED: f64 = -1e9;

/// One (query, answer) training pair; the answer excludes the EOS token,
/// which training appends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmExample {
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

pub(super) fn param_shapes(c: &LmConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d]),
        ("pos_emb".to_string(), vec![c.max_seq_len, d]),
    ];
    for i in 0..c.n_layers {
        let p = |s: &str| format!("blocks.{i}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.wo"), vec![d, d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("mlp.up"), vec![d, c.d_ff]),
            (p("mlp.up_bias"), vec![c.d_ff]),
            (p("mlp.down"), vec![c.d_ff, d]),
        ]);
    }
    out.extend([
        ("ln_f.gain".to_string(), vec![d]),
        ("ln_f.bias".to_string(), vec![d]),
        ("lm_head".to_string(), vec![d, c.vocab_size]),
    ]);
    out.sort();
    out
}

pub(super) fn layers(c: &LmConfig) -> Vec<Layer> {
    let shapes = param_shapes(c);
    let mut out = vec![Layer {
        name: "embed".into(),
        params: vec!["pos_emb".into(), "tok_emb".into()],
    }];
    for i in 0..c.n_layers {
        let prefix = format!("blocks.{i}.");
        out.push(Layer {
            name: format!("blocks.{i}"),
            params: shapes
                .iter()
                .filter(|(n, _)| n.starts_with(&prefix))
                .map(|(n, _)| n.clone())
                .collect(),
        });
    }
    out.push(Layer {
        name: "head".into(),
        params: vec!["lm_head".into(), "ln_f.bias".into(), "ln_f.gain".into()],
    });
    out
}

pub(super) fn down_proj_names(c: &LmConfig) -> Vec<String> {
    (0..c.n_layers).map(|i| format!("blocks.{i}.mlp.down")).collect()
}

/// Overwrites one row of a block's MLP output before the residual add.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Patch {
    pub layer: usize,
    pub position: usize,
    pub value: Var,
}

pub(crate) struct LmTrace {
    /// Logits for the requested rows, `[rows, vocab]`.
    pub logits: Var,
    /// Down-projection inputs per block, `[seq, d_ff]`.
    pub mlp_keys: Vec<Var>,
    /// Down-projection outputs per block, `[seq, d_model]` (before patching).
    pub mlp_outputs: Vec<Var>,
}

fn check_tokens(c: &LmConfig, tokens: &[usize], total_len: usize) -> Result<()> {
    if total_len > c.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: total_len,
            max: c.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(Error::UnknownToken(t));
    }
    Ok(())
}

fn affine_norm(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.leaf(&format!("{prefix}.gain"))?;
    let bias = g.leaf(&format!("{prefix}.bias"))?;
    let n = g.layer_norm(x)?;
    let n = g.mul_row(n, gain)?;
    Ok(g.add_row(n, bias)?)
}

fn attention(g: &mut Graph<'_>, c: &LmConfig, h: Var, i: usize, mask: Option<Var>) -> Result<Var> {
    let w = |g: &Graph<'_>, s: &str| g.leaf(&format!("blocks.{i}.attn.{s}"));
    let (wq, wk, wv, wo) = (w(g, "wq")?, w(g, "wk")?, w(g, "wv")?, w(g, "wo")?);
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let dh = c.d_model / c.n_heads;
    let mut heads = Vec::with_capacity(c.n_heads);
    for hd in 0..c.n_heads {
        let qh = g.slice_cols(q, hd * dh, dh)?;
        let kh = g.slice_cols(k, hd * dh, dh)?;
        let vh = g.slice_cols(v, hd * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let p = g.softmax(scores)?;
        heads.push(g.matmul(p, vh)?);
    }
    let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok(g.matmul(o, wo)?)
}

/// Runs the transformer on `tokens` and returns logits for `logit_rows`.
pub(crate) fn lm_graph(
    g: &mut Graph<'_>,
    c: &LmConfig,
    tokens: &[usize],
    logit_rows: &[usize],
    patch: Option<Patch>,
) -> Result<LmTrace> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    check_tokens(c, tokens, tokens.len())?;
    let seq = tokens.len();
    let tok_emb = g.leaf("tok_emb")?;
    let pos_emb = g.leaf("pos_emb")?;
    let te = g.embedding(tok_emb, tokens)?;
    let positions: Vec<usize> = (0..seq).collect();
    let pe = g.embedding(pos_emb, &positions)?;
    let mut x = g.add(te, pe)?;

    let mask = if seq > 1 {
        let mut m = Tensor::zeros(&[seq, seq]);
        for r in 0..seq {
            for col in r + 1..seq {
                m.data_mut()[r * seq + col] = MASKED;
            }
        }
        Some(g.constant(m)?)
    } else {
        None
    };

    let mut mlp_keys = Vec::with_capacity(c.n_layers);
    let mut mlp_outputs = Vec::with_capacity(c.n_layers);
    for i in 0..c.n_layers {
        let h = affine_norm(g, x, &format!("blocks.{i}.ln1"))?;
        let a = attention(g, c, h, i, mask)?;
        x = g.add(x, a)?;

        let h = affine_norm(g, x, &format!("blocks.{i}.ln2"))?;
        let up = g.leaf(&format!("blocks.{i}.mlp.up"))?;
        let up_bias = g.leaf(&format!("blocks.{i}.mlp.up_bias"))?;
        let down = g.leaf(&format!("blocks.{i}.mlp.down"))?;
        let u = g.matmul(h, up)?;
        let u = g.add_row(u, up_bias)?;
        let key = g.relu(u)?;
        let mut out = g.matmul(key, down)?;
        mlp_keys.push(key);
        mlp_outputs.push(out);
        if let Some(p) = patch.filter(|p| p.layer == i) {
            out = g.set_row(out, p.position, p.value)?;
        }
        x = g.add(x, out)?;
    }

    let xf = affine_norm(g, x, "ln_f")?;
    let sel = g.select_rows(xf, logit_rows)?;
    let head = g.leaf("lm_head")?;
    let logits = g.matmul(sel, head)?;
    Ok(LmTrace {
        logits,
        mlp_keys,
        mlp_outputs,
    })
}

fn check_pair(c: &LmConfig, query: &[usize], answer: &[usize]) -> Result<()> {
    if query.is_empty() {
        return Err(Error::InvalidInput("query must contain at least one token".into()));
    }
    if answer.is_empty() {
        return Err(Error::InvalidInput("answer must contain at least one token".into()));
    }
    let all: Vec<usize> = query.iter().chain(answer).copied().collect();
    check_tokens(c, &all, all.len())
}

/// Builds `log P(answer | query)` as a scalar node. The last answer token is
/// predicted but never fed back, so the network sees `query ++ answer[..-1]`.
pub(crate) fn logprob_graph(
    g: &mut Graph<'_>,
    c: &LmConfig,
    query: &[usize],
    answer: &[usize],
    patch: Option<Patch>,
) -> Result<(Var, LmTrace)> {
    check_pair(c, query, answer)?;
    let mut tokens = query.to_vec();
    tokens.extend_from_slice(&answer[..answer.len() - 1]);
    let rows: Vec<usize> = (query.len() - 1..tokens.len()).collect();
    let trace = lm_graph(g, c, &tokens, &rows, patch)?;
    let targets: Vec<Option<usize>> = answer.iter().map(|&t| Some(t)).collect();
    let ce = g.cross_entropy(trace.logits, &targets, Reduction::Sum)?;
    let lp = g.scale(ce, -1.0)?;
    Ok((lp, trace))
}

/// Sum over answer positions of the gold token's log-probability.
pub fn lm_logprob(model: &Model, query: &[usize], answer: &[usize]) -> Result<f64> {
    let c = model.lm_config()?;
    let mut g = Graph::with_params(model.params(), |_| false);
    let (lp, _) = logprob_graph(&mut g, c, query, answer, None)?;
    Ok(g.value(lp).item())
}

/// Log-probabilities of every vocabulary entry as the token after `prefix`.
pub fn next_token_logprobs(model: &Model, prefix: &[usize]) -> Result<Vec<f64>> {
    let c = model.lm_config()?;
    let mut g = Graph::with_params(model.params(), |_| false);
    let trace = lm_graph(&mut g, c, prefix, &[prefix.len().saturating_sub(1)], None)?;
    let row = g.value(trace.logits).row(0).to_vec();
    let lse = log_sum_exp(&row);
    Ok(row.into_iter().map(|v| v - lse).collect())
}

/// Autoregressive generation after `query`, stopping at EOS (not included)
/// or after `max_len` tokens, or when the context window is full.
pub fn sample_generate(
    model: &Model,
    query: &[usize],
    sampling: Sampling,
    max_len: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let c = model.lm_config()?;
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be ≥ 1".into()));
    }
    if let Sampling::Temperature(t) = sampling {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {t}")));
        }
    }
    if query.is_empty() {
        return Err(Error::InvalidInput("query must contain at least one token".into()));
    }
    check_tokens(c, query, query.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = query.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len && seq.len() < c.max_seq_len {
        let logp = next_token_logprobs(model, &seq)?;
        let next = match sampling {
            Sampling::Greedy => argmax(&logp),
            Sampling::Temperature(t) => {
                let mut p: Vec<f64> = logp.iter().map(|v| v / t).collect();
                softmax_in_place(&mut p);
                sample_index(&p, rng.random::<f64>())
            }
        };
        if next == EOS {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a normalised distribution.
fn sample_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left `acc` a hair under 1; fall back to the last nonzero entry
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}
