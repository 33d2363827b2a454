//! `ripple-lab`: reproducible pipelines for the ripple-effect laboratory.
//!
//! Every subcommand resolves its config from `--config`, then `--seed`,
//! then each `--set key=value`, writes `config.resolved.json` into `--out`,
//! and prints a one-line summary. Exit status is 0 on success, 1 for
//! invalid input or config, 2 when a computation or file operation fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ripple_core::ntk::NtkRunConfig;
use ripple_core::pipeline::{
    resolve_config, run_edit, run_eval, run_gen_data, run_gradsim, run_ntk_scan, run_train, EditRunConfig,
    EvalRunConfig, GenDataConfig, GradsimRunConfig, TrainRunConfig,
};
use ripple_core::{Error, Result};

const THREADS_VAR: &str = "RIPPLE_LAB_THREADS";

#[derive(Parser)]
#[command(name = "ripple-lab", version, about = "Gradient similarity and ripple effects of knowledge edits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world, its fact corpus and edit cases.
    GenData(Common),
    /// Train the toy LM on a generated corpus.
    Train(Common),
    /// Apply every edit case to a trained checkpoint.
    Edit(Common),
    /// GradSim between each edit and its ripple pairs.
    Gradsim(Common),
    /// Edit, measure ripple effects, and correlate them with GradSim.
    Eval(Common),
    /// Width scan of ripple effects on two-head MLPs.
    NtkScan(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Dotted override, e.g. `--set edit.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_set)]
    sets: Vec<(String, String)>,
}

fn parse_set(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

fn read_config(path: Option<&Path>) -> Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// The scan needs widths and a seed count; absent ones come from the
/// standard five-width grid.
fn ntk_base(file: Option<Value>) -> Result<Value> {
    let mut base = json!({ "widths": [64, 128, 256, 512, 1024], "seeds": 5 });
    match file {
        None => {}
        Some(Value::Object(m)) => base.as_object_mut().expect("literal object").extend(m),
        Some(_) => return Err(Error::InvalidConfig("config must be a JSON object".into())),
    }
    Ok(base)
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_VAR} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("{THREADS_VAR}: {e}")))
}

fn run(cmd: Command) -> Result<String> {
    init_threads()?;
    match cmd {
        Command::GenData(a) => {
            let cfg: GenDataConfig = resolve_config(read_config(a.config.as_deref())?, a.seed, &a.sets)?;
            let d = run_gen_data(&cfg, &a.out)?;
            Ok(format!(
                "gen-data: {} facts, {} edit cases, vocab {} -> {}",
                d.corpus.records.len(),
                d.cases.len(),
                d.vocab().len(),
                a.out.display()
            ))
        }
        Command::Train(a) => {
            let cfg: TrainRunConfig = resolve_config(read_config(a.config.as_deref())?, a.seed, &a.sets)?;
            let s = run_train(&cfg, &a.out)?;
            Ok(format!(
                "train: {} steps, loss {:.4e} -> {:.4e}, memorized {:.3}",
                s.steps, s.initial_loss, s.final_loss, s.memorized
            ))
        }
        Command::Edit(a) => {
            let cfg: EditRunConfig = resolve_config(read_config(a.config.as_deref())?, a.seed, &a.sets)?;
            let recs = run_edit(&cfg, &a.out)?;
            let ok = recs.iter().filter(|r| r.success).count();
            Ok(format!("edit: {ok}/{} edits succeeded", recs.len()))
        }
        Command::Gradsim(a) => {
            let cfg: GradsimRunConfig = resolve_config(read_config(a.config.as_deref())?, a.seed, &a.sets)?;
            let n = run_gradsim(&cfg, &a.out)?;
            Ok(format!("gradsim: {n} pairs"))
        }
        Command::Eval(a) => {
            let cfg: EvalRunConfig = resolve_config(read_config(a.config.as_deref())?, a.seed, &a.sets)?;
            let r = run_eval(&cfg, &a.out)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            let abs = r.correlation.metric("abs_gain");
            Ok(format!(
                "eval: {} edits, success {:.3}, r(abs_gain) {}, control r {}, over-ripple {}/{}",
                r.edits,
                r.edit_success_rate,
                fmt(abs.and_then(|m| m.pearson_r)),
                fmt(abs.and_then(|m| m.control_r)),
                r.over_ripple.edit_target_more_similar,
                r.over_ripple.flagged
            ))
        }
        Command::NtkScan(a) => {
            let base = ntk_base(read_config(a.config.as_deref())?)?;
            let cfg: NtkRunConfig = resolve_config(Some(base), a.seed, &a.sets)?;
            let r = run_ntk_scan(&cfg, &a.out)?;
            Ok(format!(
                "ntk-scan: {} cells, slope {:.4} in [{}, {}]: {}",
                r.cells.len(),
                r.summary.slope,
                r.summary.slope_band.0,
                r.summary.slope_band.1,
                r.summary.verdict
            ))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
