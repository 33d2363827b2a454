//! The full sweep: edit every case, score every ripple pair, correlate.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    defaults, edit_request, load_data, take_cases, write_edits_csv, write_file, write_gradsim_file, write_resolved,
    EditRecord,
};
use crate::editing::{apply_edit, edit_succeeded, EditConfig};
use crate::error::Result;
use crate::format::json_string;
use crate::gradsim::{grad_sim, knowledge_gradient, GradSimRecord};
use crate::metrics::{
    abs_gain, build_report, em_rate, over_ripple_stat, rel_gain, write_metrics_csv, CorrelationReport, EmConfig,
    MetricRow,
};
use crate::models::{load_checkpoint, lm_logprob, Layer, Model, ParamFilter};
use crate::worldgen::{Category, EditCase, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(default = "defaults::edit")]
    pub edit: EditConfig,
    #[serde(default)]
    pub em: EmConfig,
    /// Parameters the knowledge gradients are taken over.
    #[serde(default)]
    pub params: ParamFilter,
    #[serde(default)]
    pub max_cases: Option<usize>,
}

impl EvalRunConfig {
    pub fn new(data: impl Into<PathBuf>, checkpoint: impl Into<PathBuf>) -> Self {
        serde_json::from_value(serde_json::json!({ "data": data.into(), "checkpoint": checkpoint.into() }))
            .expect("only paths are required")
    }
}

/// Everything measured for one edit case.
#[derive(Debug, Clone)]
pub struct CaseEvaluation {
    pub edit: EditRecord,
    pub rows: Vec<MetricRow>,
    pub gradsim: Vec<GradSimRecord>,
    /// Post-edit greedy answer to `q_y` is the edit target `a′_x`, per row
    /// (`None` when `a′_y = a′_x`).
    pub edit_target_argmax: Vec<Option<bool>>,
}

/// Edits `pre` with `case` and scores each ripple pair. GradSim uses
/// gradients at the pre-edit parameters.
pub fn evaluate_case(
    pre: &Model,
    vocab: &Vocab,
    case: &EditCase,
    cfg: &EvalRunConfig,
    layers: &[Layer],
    case_index: usize,
) -> Result<CaseEvaluation> {
    let req = edit_request(vocab, case)?;
    let outcome = apply_edit(pre, &req, &cfg.edit).map_err(|e| e.context(case.case_id.clone()))?;
    let post = &outcome.model;
    let gx = knowledge_gradient(pre, &req.query, &req.target, &cfg.params)?;
    let pre_x = lm_logprob(pre, &req.query, &req.target)?;
    let post_x = lm_logprob(post, &req.query, &req.target)?;
    let gain_x = post_x - pre_x;
    let seed = |j: usize| crate::seed::mix(cfg.seed, case_index, j);
    let edit_em = em_rate(post, &req.query, &req.target, false, &cfg.em, seed(0))?;

    let mut rows = Vec::with_capacity(case.ripples.len());
    let mut records = Vec::with_capacity(case.ripples.len());
    let mut argmax = Vec::with_capacity(case.ripples.len());
    for (j, pair) in case.ripples.iter().enumerate() {
        let ctx = |e: crate::Error| e.context(pair.id.clone());
        let qy = vocab.encode(&pair.query)?;
        let ay = vocab.encode(&pair.answer)?;
        let gy = knowledge_gradient(pre, &qy, &ay, &cfg.params).map_err(ctx)?;
        let record = GradSimRecord::compute(
            &case.case_id,
            &pair.id,
            &pair.category.to_string(),
            &gx,
            &gy,
            layers,
            &cfg.params,
        )
        .map_err(ctx)?;
        let em = match (&pair.forbidden, pair.category) {
            (Some(f), Category::NEG) => em_rate(post, &qy, &vocab.encode(f)?, true, &cfg.em, seed(j + 1))?,
            _ => em_rate(post, &qy, &ay, false, &cfg.em, seed(j + 1))?,
        };
        let gain = abs_gain(pre, post, &qy, &ay)?;
        let (gs_target, gap, top) = if ay != req.target {
            let gyx = knowledge_gradient(pre, &qy, &req.target, &cfg.params).map_err(ctx)?;
            let gs_x = grad_sim(&gx, &gyx).map_err(ctx)?;
            let stat = over_ripple_stat(post, &qy, &req.target, &ay, (gs_x, record.gradsim))?;
            (Some(gs_x), Some(stat.gap), Some(edit_succeeded(post, &qy, &req.target)?))
        } else {
            (None, None, None)
        };
        let pre_y = lm_logprob(pre, &qy, &ay)?;
        rows.push(MetricRow {
            edit_id: case.case_id.clone(),
            pair_id: pair.id.clone(),
            category: pair.category,
            gradsim: record.gradsim,
            em_rate: em,
            abs_gain: gain,
            rel_gain: rel_gain(gain, gain_x),
            pre_logprob: pre_y,
            post_logprob: pre_y + gain,
            edit_em,
            gradsim_edit_target: gs_target,
            over_ripple_gap: gap,
        });
        records.push(record);
        argmax.push(top);
    }
    Ok(CaseEvaluation {
        edit: EditRecord {
            case_id: case.case_id.clone(),
            layer: outcome.layer,
            steps: outcome.steps,
            pre_logprob: pre_x,
            post_logprob: post_x,
            success: edit_succeeded(post, &req.query, &req.target)?,
        },
        rows,
        gradsim: records,
        edit_target_argmax: argmax,
    })
}

/// Rows where the post-edit greedy answer to `q_y` is the edit target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverRippleSummary {
    pub flagged: usize,
    /// Flagged rows with GradSim(q_y, a′_x) > GradSim(q_y, a′_y).
    pub edit_target_more_similar: usize,
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub edits: usize,
    pub edit_success_rate: f64,
    pub correlation: CorrelationReport,
    pub over_ripple: OverRippleSummary,
}

pub fn summarize_over_ripple(evals: &[CaseEvaluation]) -> OverRippleSummary {
    let mut flagged = 0;
    let mut higher = 0;
    for e in evals {
        for (row, top) in e.rows.iter().zip(&e.edit_target_argmax) {
            if *top == Some(true) {
                flagged += 1;
                if row.gradsim_edit_target.is_some_and(|g| g > row.gradsim) {
                    higher += 1;
                }
            }
        }
    }
    OverRippleSummary {
        flagged,
        edit_target_more_similar: higher,
        fraction: (flagged > 0).then(|| higher as f64 / flagged as f64),
    }
}

/// Evaluates `cases` on `model` without touching the filesystem.
pub fn evaluate_cases(model: &Model, vocab: &Vocab, cases: &[EditCase], cfg: &EvalRunConfig) -> Result<Vec<CaseEvaluation>> {
    cfg.edit.validate()?;
    cfg.em.validate()?;
    let layers = model.layers_within(&model.select(&cfg.params)?);
    cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| evaluate_case(model, vocab, case, cfg, &layers, i))
        .collect()
}

pub fn eval_report(evals: &[CaseEvaluation]) -> Result<EvalReport> {
    let rows: Vec<MetricRow> = evals.iter().flat_map(|e| e.rows.iter().cloned()).collect();
    let successes = evals.iter().filter(|e| e.edit.success).count();
    Ok(EvalReport {
        edits: evals.len(),
        edit_success_rate: successes as f64 / evals.len().max(1) as f64,
        correlation: build_report(&rows)?,
        over_ripple: summarize_over_ripple(evals),
    })
}

pub fn run_eval(cfg: &EvalRunConfig, out: &Path) -> Result<EvalReport> {
    cfg.edit.validate()?;
    cfg.em.validate()?;
    let data = load_data(&cfg.data)?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    write_resolved(out, cfg)?;
    let evals = evaluate_cases(&model, data.vocab(), take_cases(&data.cases, cfg.max_cases), cfg)?;
    let report = eval_report(&evals)?;

    let rows: Vec<MetricRow> = evals.iter().flat_map(|e| e.rows.iter().cloned()).collect();
    let mut buf = Vec::new();
    write_metrics_csv(&rows, &mut buf)?;
    write_file(&out.join("metrics.csv"), buf)?;
    let records: Vec<GradSimRecord> = evals.iter().flat_map(|e| e.gradsim.iter().cloned()).collect();
    let layers = model.layers_within(&model.select(&cfg.params)?);
    let names: Vec<String> = layers.iter().map(|l| l.name.clone()).collect();
    write_gradsim_file(&records, &names, &out.join("gradsim.csv"))?;
    let edits: Vec<EditRecord> = evals.iter().map(|e| e.edit.clone()).collect();
    write_edits_csv(&edits, &out.join("edits.csv"))?;
    write_file(&out.join("report.json"), json_string(&report)?)?;
    Ok(report)
}
