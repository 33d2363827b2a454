//! Ripple-effect metrics and their correlation with GradSim.
//!
//! Per ripple pair: sampled exact-match rate, absolute and relative gain in
//! gold-answer log-likelihood, and the over-ripple statistic. A report
//! correlates GradSim with each metric over the ripple-task rows and, as a
//! negative control, over the preservation rows.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{float, opt_float};
use crate::models::{lm_logprob, sample_generate, Model, Sampling};
use crate::worldgen::Category;

/// `rel_gain` is undefined when the edited fact's own gain is smaller than
/// this in magnitude.
pub const REL_GAIN_EPS: f64 = 1e-6;
/// Original-fact EM at or above which an edit counts as successful.
pub const CLUSTER_THRESHOLD: f64 = 0.5;
pub const MIN_ROWS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmConfig {
    #[serde(default = "defaults::n_samples")]
    pub n_samples: usize,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default = "defaults::max_len")]
    pub max_len: usize,
}

mod defaults {
    pub fn n_samples() -> usize {
        50
    }
    pub fn temperature() -> f64 {
        0.7
    }
    pub fn max_len() -> usize {
        15
    }
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_samples: defaults::n_samples(),
            temperature: defaults::temperature(),
            max_len: defaults::max_len(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.max_len == 0 {
            return Err(Error::InvalidConfig("em n_samples and max_len must be ≥ 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// `needle` occurs as a contiguous run in `hay`.
pub fn contains_tokens(hay: &[usize], needle: &[usize]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

/// Fraction of sampled completions containing `answer`; with `avoid` the
/// fraction that do not contain it. Sample `i` uses its own derived seed,
/// so the value depends only on `seed`.
pub fn em_rate(model: &Model, query: &[usize], answer: &[usize], avoid: bool, cfg: &EmConfig, seed: u64) -> Result<f64> {
    cfg.validate()?;
    let mut hits = 0usize;
    for i in 0..cfg.n_samples {
        let out = sample_generate(
            model,
            query,
            Sampling::Temperature(cfg.temperature),
            cfg.max_len,
            crate::seed::mix(seed, i, 0),
        )?;
        if contains_tokens(&out, answer) != avoid {
            hits += 1;
        }
    }
    Ok(hits as f64 / cfg.n_samples as f64)
}

/// `log P_post(answer | query) − log P_pre(answer | query)`.
pub fn abs_gain(pre: &Model, post: &Model, query: &[usize], answer: &[usize]) -> Result<f64> {
    Ok(lm_logprob(post, query, answer)? - lm_logprob(pre, query, answer)?)
}

/// Ripple gain relative to the edited fact's gain; `None` when the latter
/// is below [`REL_GAIN_EPS`] in magnitude.
pub fn rel_gain(abs_gain_y: f64, abs_gain_x: f64) -> Option<f64> {
    (abs_gain_x.abs() >= REL_GAIN_EPS).then(|| abs_gain_y / abs_gain_x)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!("pearson: {} xs but {} ys", xs.len(), ys.len())));
    }
    if xs.len() < MIN_ROWS {
        return Err(Error::InsufficientRows {
            need: MIN_ROWS,
            have: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // a constant column still leaves up to n·ε·|mean| of rounding per entry
    let tiny = |s: f64, m: f64| s <= n * (n * f64::EPSILON * m.abs()).powi(2);
    if tiny(sxx, mx) || tiny(syy, my) {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One ripple pair of one edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub edit_id: String,
    pub pair_id: String,
    pub category: Category,
    /// GradSim between the edit `(q_x, a′_x)` and the pair `(q_y, a′_y)`.
    pub gradsim: f64,
    pub em_rate: f64,
    pub abs_gain: f64,
    pub rel_gain: Option<f64>,
    pub pre_logprob: f64,
    pub post_logprob: f64,
    /// EM of the edited fact itself after the edit.
    pub edit_em: f64,
    /// GradSim between the edit and `(q_y, a′_x)`; absent when `a′_y = a′_x`.
    pub gradsim_edit_target: Option<f64>,
    /// `log P(a′_x | q_y) − log P(a′_y | q_y)` after the edit.
    pub over_ripple_gap: Option<f64>,
}

pub const METRICS: [&str; 3] = ["em_rate", "abs_gain", "rel_gain"];

impl MetricRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "em_rate" => Some(self.em_rate),
            "abs_gain" => Some(self.abs_gain),
            "rel_gain" => self.rel_gain,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub name: String,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_gradsim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub metric: String,
    /// `None` when either column has no variance.
    pub pearson_r: Option<f64>,
    pub sample_count: usize,
    pub control_r: Option<f64>,
    pub control_count: usize,
    /// Rows dropped because the metric is undefined.
    pub excluded: usize,
    pub clusters: Vec<ClusterStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub cluster_threshold: f64,
    pub ripple_rows: usize,
    pub control_rows: usize,
    pub metrics: Vec<MetricCorrelation>,
}

impl CorrelationReport {
    pub fn metric(&self, name: &str) -> Option<&MetricCorrelation> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn correlate(rows: &[&MetricRow], metric: &str) -> (Option<f64>, usize, usize) {
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows.iter().filter_map(|r| r.metric(metric).map(|m| (r.gradsim, m))).unzip();
    let r = pearson(&xs, &ys).ok();
    (r, xs.len(), rows.len() - xs.len())
}

/// Correlates GradSim with every metric. Ripple rows are the should-change
/// and should-avoid categories; PV/RS rows form the control.
pub fn build_report(rows: &[MetricRow]) -> Result<CorrelationReport> {
    let ripple: Vec<&MetricRow> = rows.iter().filter(|r| !r.category.is_control()).collect();
    let control: Vec<&MetricRow> = rows.iter().filter(|r| r.category.is_control()).collect();
    if ripple.len() < MIN_ROWS {
        return Err(Error::InsufficientRows {
            need: MIN_ROWS,
            have: ripple.len(),
        });
    }
    let metrics = METRICS
        .iter()
        .map(|&name| {
            let (r, n, excluded) = correlate(&ripple, name);
            let (control_r, control_count, _) = correlate(&control, name);
            let clusters = [("successful", true), ("unsuccessful", false)]
                .iter()
                .map(|&(label, ok)| {
                    let members: Vec<&&MetricRow> =
                        ripple.iter().filter(|r| (r.edit_em >= CLUSTER_THRESHOLD) == ok).collect();
                    let gs: Vec<f64> = members.iter().map(|r| r.gradsim).collect();
                    let ms: Vec<f64> = members.iter().filter_map(|r| r.metric(name)).collect();
                    ClusterStat {
                        name: label.to_string(),
                        count: members.len(),
                        mean_gradsim: mean(&gs),
                        mean_metric: mean(&ms),
                    }
                })
                .collect();
            MetricCorrelation {
                metric: name.to_string(),
                pearson_r: r,
                sample_count: n,
                control_r,
                control_count,
                excluded,
                clusters,
            }
        })
        .collect();
    Ok(CorrelationReport {
        cluster_threshold: CLUSTER_THRESHOLD,
        ripple_rows: ripple.len(),
        control_rows: control.len(),
        metrics,
    })
}

/// Whether the edited target leaks into a related query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverRippleStat {
    pub logprob_edit_target: f64,
    pub logprob_gold: f64,
    /// `logprob_edit_target − logprob_gold`.
    pub gap: f64,
    pub gradsim_edit_target: f64,
    pub gradsim_gold: f64,
    /// The edited target outscores the gold answer.
    pub flag: bool,
}

/// `gradsims` are GradSim of the edit with `(q_y, a′_x)` and with
/// `(q_y, a′_y)`, in that order.
pub fn over_ripple_stat(
    post: &Model,
    query: &[usize],
    edit_target: &[usize],
    gold: &[usize],
    gradsims: (f64, f64),
) -> Result<OverRippleStat> {
    if edit_target == gold {
        return Err(Error::InvalidInput("over-ripple needs an edit target different from the gold answer".into()));
    }
    let lx = lm_logprob(post, query, edit_target)?;
    let ly = lm_logprob(post, query, gold)?;
    Ok(OverRippleStat {
        logprob_edit_target: lx,
        logprob_gold: ly,
        gap: lx - ly,
        gradsim_edit_target: gradsims.0,
        gradsim_gold: gradsims.1,
        flag: lx > ly,
    })
}

pub const METRIC_COLUMNS: [&str; 13] = [
    "edit_id",
    "pair_id",
    "category",
    "gradsim",
    "em_rate",
    "abs_gain",
    "rel_gain",
    "pre_logprob",
    "post_logprob",
    "edit_em",
    "gradsim_edit_target",
    "over_ripple_gap",
    "over_ripple",
];

pub fn write_metrics_csv(rows: &[MetricRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.edit_id.clone(),
            r.pair_id.clone(),
            r.category.to_string(),
            float(r.gradsim),
            float(r.em_rate),
            float(r.abs_gain),
            opt_float(r.rel_gain),
            float(r.pre_logprob),
            float(r.post_logprob),
            float(r.edit_em),
            opt_float(r.gradsim_edit_target),
            opt_float(r.over_ripple_gap),
            r.over_ripple_gap.map(|g| (g > 0.0).to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
