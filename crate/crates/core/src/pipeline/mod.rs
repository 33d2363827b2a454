//! Reproducible pipelines behind the command-line tool.
//!
//! Each command reads a JSON config (unknown keys rejected), applies
//! `--seed` and `--set key=value` overrides, writes the fully resolved
//! config as `config.resolved.json` into its output directory, and then
//! writes its artifacts there. Outputs depend only on the resolved config
//! and the input files.

mod config;
mod eval;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::editing::{apply_edit, edit_succeeded, EditConfig, EditRequest};
use crate::error::{Error, Result};
use crate::format::{float, json_string};
use crate::gradsim::{knowledge_gradient, layer_l1_profile, write_gradsim_csv, GradSimRecord};
use crate::models::{
    init_model, load_checkpoint, save_checkpoint, train, Dataset, LmConfig, LmExample, Model, ModelConfig, Optimizer,
    ParamFilter, TrainConfig,
};
use crate::ntk::{width_scan, write_scan_csv, NtkRunConfig, ScanResult};
use crate::worldgen::{
    derive_ripples, load_rippleedits_jsonl, render_corpus, sample_edits, save_rippleedits_jsonl, Category, EditCase,
    FactCorpus, Lang, Vocab, World,
};

pub use config::{apply_override, resolve_config};
pub use eval::{
    eval_report, evaluate_case, evaluate_cases, run_eval, summarize_over_ripple, CaseEvaluation, EvalReport, EvalRunConfig,
    OverRippleSummary,
};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const WORLD_FILE: &str = "world.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CASES_FILE: &str = "cases.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

pub(crate) fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::from(e).context(path.display().to_string())
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_context(e, path))
}

pub(crate) fn create_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_context(e, out))
}

/// Creates `out` and records the resolved config in it.
pub fn write_resolved<T: Serialize>(out: &Path, cfg: &T) -> Result<()> {
    create_out_dir(out)?;
    write_file(&out.join(RESOLVED_CONFIG), json_string(cfg)?)
}

mod defaults {
    use crate::models::Optimizer;

    pub fn num_persons() -> usize {
        40
    }
    pub fn num_countries() -> usize {
        6
    }
    pub fn languages() -> Vec<crate::worldgen::Lang> {
        vec![crate::worldgen::Lang::L1, crate::worldgen::Lang::L2]
    }
    pub fn num_edits() -> usize {
        40
    }
    pub fn d_model() -> usize {
        32
    }
    pub fn n_layers() -> usize {
        2
    }
    pub fn n_heads() -> usize {
        2
    }
    pub fn d_ff() -> usize {
        64
    }
    pub fn max_seq_len() -> usize {
        8
    }
    pub fn train_steps() -> usize {
        400
    }
    pub fn train_rate() -> f64 {
        0.01
    }
    pub fn optimizer() -> Optimizer {
        Optimizer::adam()
    }
    pub fn stop_loss() -> Option<f64> {
        Some(0.01)
    }
    pub fn edit() -> crate::editing::EditConfig {
        crate::editing::EditConfig::rank_one()
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::num_persons")]
    pub num_persons: usize,
    #[serde(default = "defaults::num_countries")]
    pub num_countries: usize,
    #[serde(default = "defaults::languages")]
    pub languages: Vec<Lang>,
    #[serde(default = "defaults::num_edits")]
    pub num_edits: usize,
    /// Reject worlds whose vocabulary would exceed this many tokens.
    #[serde(default)]
    pub max_vocab: Option<usize>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// A generated world and everything rendered from it.
#[derive(Debug, Clone)]
pub struct WorldData {
    pub world: World,
    pub corpus: FactCorpus,
    pub cases: Vec<EditCase>,
}

impl WorldData {
    pub fn vocab(&self) -> &Vocab {
        &self.corpus.vocab
    }

    pub fn examples(&self) -> Vec<LmExample> {
        self.corpus
            .records
            .iter()
            .map(|r| LmExample {
                query: r.query.clone(),
                answer: r.answer.clone(),
            })
            .collect()
    }
}

pub fn generate_data(cfg: &GenDataConfig) -> Result<WorldData> {
    let world = crate::worldgen::generate_world(cfg.num_persons, cfg.num_countries, cfg.seed)?;
    let corpus = render_corpus(&world, &cfg.languages, cfg.max_vocab)?;
    if !cfg.languages.contains(&Lang::L1) {
        return Err(Error::InvalidConfig("languages must include L1, the language of every edit query".into()));
    }
    let edits = sample_edits(&world, cfg.num_edits, crate::seed::mix(cfg.seed, 1, 0))?;
    let mut cases = edits
        .into_iter()
        .map(|(p, c)| derive_ripples(&world, p, c))
        .collect::<Result<Vec<_>>>()?;
    // cross-lingual pairs are only meaningful when L2 was rendered
    if !cfg.languages.contains(&Lang::L2) {
        for c in &mut cases {
            c.ripples.retain(|r| r.category != Category::XLING);
        }
    }
    Ok(WorldData { world, corpus, cases })
}

pub fn run_gen_data(cfg: &GenDataConfig, out: &Path) -> Result<WorldData> {
    let data = generate_data(cfg)?;
    write_resolved(out, cfg)?;
    write_file(&out.join(WORLD_FILE), data.world.to_json()? + "\n")?;
    write_file(&out.join(VOCAB_FILE), json_string(data.vocab())?)?;
    write_file(&out.join(CORPUS_FILE), data.corpus.to_jsonl()?)?;
    save_rippleedits_jsonl(&data.cases, &out.join(CASES_FILE))?;
    Ok(data)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_context(e, path))
}

/// Reads the files written by [`run_gen_data`].
pub fn load_data(dir: &Path) -> Result<WorldData> {
    let world = World::from_json(&read_text(&dir.join(WORLD_FILE))?)?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab: Vocab = serde_json::from_str(&read_text(&vocab_path)?).map_err(|e| Error::Parse {
        path: vocab_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let corpus_path = dir.join(CORPUS_FILE);
    let corpus = FactCorpus::from_jsonl(vocab, &read_text(&corpus_path)?, &corpus_path.display().to_string())?;
    let cases = load_rippleedits_jsonl(&dir.join(CASES_FILE))?;
    Ok(WorldData { world, corpus, cases })
}

// ------------------------------------------------------------------- train

/// Transformer shape; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmShape {
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::d_ff")]
    pub d_ff: usize,
    #[serde(default = "defaults::max_seq_len")]
    pub max_seq_len: usize,
}

impl Default for LmShape {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl LmShape {
    pub fn config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Directory written by `gen-data`.
    pub data: PathBuf,
    #[serde(default)]
    pub model: LmShape,
    #[serde(default = "defaults::train_steps")]
    pub steps: usize,
    #[serde(default = "defaults::train_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: Optimizer,
    #[serde(default = "defaults::stop_loss")]
    pub stop_loss: Option<f64>,
}

impl TrainRunConfig {
    pub fn new(data: impl Into<PathBuf>) -> Self {
        serde_json::from_value(serde_json::json!({ "data": data.into() })).expect("only data is required")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Fraction of corpus queries whose greedy answer is the gold answer.
    pub memorized: f64,
}

/// Trains the toy LM on the whole corpus.
pub fn train_lm(cfg: &TrainRunConfig, data: &WorldData) -> Result<(Model, Vec<f64>)> {
    let model = init_model(&ModelConfig::Lm(cfg.model.config(data.vocab().len())), cfg.seed)?;
    let tc = TrainConfig {
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        optimizer: cfg.optimizer,
        seed: cfg.seed,
        heads: Default::default(),
        params: ParamFilter::All,
        stop_loss: cfg.stop_loss,
    };
    train(&model, &Dataset::Lm(data.examples()), &tc)
}

pub fn memorized_fraction(model: &Model, examples: &[LmExample]) -> Result<f64> {
    let hits = examples
        .par_iter()
        .map(|e| edit_succeeded(model, &e.query, &e.answer))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / examples.len().max(1) as f64)
}

pub fn run_train(cfg: &TrainRunConfig, out: &Path) -> Result<TrainSummary> {
    let data = load_data(&cfg.data)?;
    write_resolved(out, cfg)?;
    let (model, curve) = train_lm(cfg, &data)?;
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", float(*l)));
    }
    write_file(&out.join("train_curve.csv"), csv)?;
    let summary = TrainSummary {
        steps: curve.len(),
        initial_loss: curve.first().copied().unwrap_or(f64::NAN),
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
        memorized: memorized_fraction(&model, &data.examples())?,
    };
    write_file(&out.join("train_summary.json"), json_string(&summary)?)?;
    Ok(summary)
}

// -------------------------------------------------------------------- edit

/// The edit of `case` as token ids.
pub fn edit_request(vocab: &Vocab, case: &EditCase) -> Result<EditRequest> {
    let query = vocab.encode(&case.edit.query)?;
    let subject_pos = case.edit.subject_pos.unwrap_or(query.len().saturating_sub(1));
    Ok(EditRequest {
        query,
        subject_pos,
        target: vocab.encode(&case.edit.new_answer)?,
    })
}

fn take_cases(cases: &[EditCase], max: Option<usize>) -> &[EditCase] {
    &cases[..max.map_or(cases.len(), |m| m.min(cases.len()))]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(default = "defaults::edit")]
    pub edit: EditConfig,
    /// Only the first `max_cases` cases.
    #[serde(default)]
    pub max_cases: Option<usize>,
    /// Also write every edited model as `edited/<index>.ckpt`.
    #[serde(default)]
    pub save_models: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub case_id: String,
    pub layer: Option<usize>,
    pub steps: usize,
    pub pre_logprob: f64,
    pub post_logprob: f64,
    pub success: bool,
}

pub fn write_edits_csv(records: &[EditRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["case_id", "layer", "steps", "pre_logprob", "post_logprob", "success"])?;
    for r in records {
        w.write_record([
            r.case_id.clone(),
            r.layer.map(|l| l.to_string()).unwrap_or_default(),
            r.steps.to_string(),
            float(r.pre_logprob),
            float(r.post_logprob),
            r.success.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::from(e.into_error()))?;
    write_file(path, bytes)
}

pub fn run_edit(cfg: &EditRunConfig, out: &Path) -> Result<Vec<EditRecord>> {
    cfg.edit.validate()?;
    let data = load_data(&cfg.data)?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    write_resolved(out, cfg)?;
    let cases = take_cases(&data.cases, cfg.max_cases);
    let results: Vec<(EditRecord, Model)> = cases
        .par_iter()
        .map(|case| {
            let req = edit_request(data.vocab(), case)?;
            let o = apply_edit(&model, &req, &cfg.edit).map_err(|e| e.context(case.case_id.clone()))?;
            let rec = EditRecord {
                case_id: case.case_id.clone(),
                layer: o.layer,
                steps: o.steps,
                pre_logprob: o.pre_logprob.unwrap_or(f64::NAN),
                post_logprob: o.post_logprob.unwrap_or(f64::NAN),
                success: edit_succeeded(&o.model, &req.query, &req.target)?,
            };
            Ok((rec, o.model))
        })
        .collect::<Result<_>>()?;
    if cfg.save_models {
        let dir = out.join("edited");
        create_out_dir(&dir)?;
        for (i, (_, m)) in results.iter().enumerate() {
            save_checkpoint(m, &dir.join(format!("{i}.ckpt")))?;
        }
    }
    let records: Vec<EditRecord> = results.into_iter().map(|(r, _)| r).collect();
    write_edits_csv(&records, &out.join("edits.csv"))?;
    Ok(records)
}

// ---------------------------------------------------------------- gradsim

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradsimRunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub params: ParamFilter,
    #[serde(default)]
    pub max_cases: Option<usize>,
}

/// L1 profile of one fact's knowledge gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub id: String,
    pub profile: Vec<f64>,
}

/// GradSim between every edit `(q_x, a′_x)` and its ripple pairs
/// `(q_y, a′_y)`, plus the per-layer L1 profile of every gradient involved.
pub fn gradsim_records(
    model: &Model,
    vocab: &Vocab,
    cases: &[EditCase],
    filter: &ParamFilter,
) -> Result<(Vec<GradSimRecord>, Vec<ProfileRecord>, Vec<String>)> {
    let layers = model.layers_within(&model.select(filter)?);
    let names: Vec<String> = layers.iter().map(|l| l.name.clone()).collect();
    let per_case: Vec<(Vec<GradSimRecord>, Vec<ProfileRecord>)> = cases
        .par_iter()
        .map(|case| {
            let req = edit_request(vocab, case)?;
            let gx = knowledge_gradient(model, &req.query, &req.target, filter)?;
            let mut recs = Vec::new();
            let mut profiles = vec![ProfileRecord {
                id: case.case_id.clone(),
                profile: layer_l1_profile(&gx, &layers)?,
            }];
            for r in &case.ripples {
                let gy = knowledge_gradient(model, &vocab.encode(&r.query)?, &vocab.encode(&r.answer)?, filter)?;
                recs.push(
                    GradSimRecord::compute(&case.case_id, &r.id, &r.category.to_string(), &gx, &gy, &layers, filter)
                        .map_err(|e| e.context(r.id.clone()))?,
                );
                profiles.push(ProfileRecord {
                    id: r.id.clone(),
                    profile: layer_l1_profile(&gy, &layers)?,
                });
            }
            Ok((recs, profiles))
        })
        .collect::<Result<_>>()?;
    let (recs, profiles): (Vec<_>, Vec<_>) = per_case.into_iter().unzip();
    Ok((recs.concat(), profiles.concat(), names))
}

pub fn write_profiles_csv(profiles: &[ProfileRecord], layer_names: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(layer_names.iter().map(|n| format!("l1_{n}")));
    w.write_record(&header)?;
    for p in profiles {
        let mut row = vec![p.id.clone()];
        row.extend(p.profile.iter().map(|v| float(*v)));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::from(e.into_error()))?;
    write_file(path, bytes)
}

pub fn write_gradsim_file(records: &[GradSimRecord], layer_names: &[String], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_gradsim_csv(records, layer_names, &mut buf)?;
    write_file(path, buf)
}

pub fn run_gradsim(cfg: &GradsimRunConfig, out: &Path) -> Result<usize> {
    let data = load_data(&cfg.data)?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    write_resolved(out, cfg)?;
    let (recs, profiles, names) =
        gradsim_records(&model, data.vocab(), take_cases(&data.cases, cfg.max_cases), &cfg.params)?;
    write_gradsim_file(&recs, &names, &out.join("gradsim.csv"))?;
    write_profiles_csv(&profiles, &names, &out.join("profiles.csv"))?;
    Ok(recs.len())
}

// ---------------------------------------------------------------- ntk-scan

pub fn run_ntk_scan(cfg: &NtkRunConfig, out: &Path) -> Result<ScanResult> {
    cfg.validate()?;
    write_resolved(out, cfg)?;
    let result = width_scan(cfg)?;
    let mut buf = Vec::new();
    write_scan_csv(&result.cells, &mut buf)?;
    write_file(&out.join("scan.csv"), buf)?;
    write_file(&out.join("summary.json"), json_string(&result.summary)?)?;
    write_file(&out.join("cells.json"), json_string(&result.cells)?)?;
    Ok(result)
}
