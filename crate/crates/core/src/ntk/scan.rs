//! Width scan over paired edit runs.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{empirical_ntk, fit_exp_decay, fit_exp_decay_above, fit_loglog_slope, resolution_floor, joint_ntk, ntk_learning_rate, ripple_delta, spectrum, spectrum_bound, LogLogFit};
use crate::autodiff::{Graph, GradientVector, Tensor};
use crate::error::{Error, Result};
use crate::format::float;
use crate::models::{head_graph, init_model, optimize, Activation, Head, MlpConfig, Model, ModelConfig, RegressionSet, TrainConfig};

/// Slopes inside this band count as `1/√n` scaling.
pub const SLOPE_BAND: (f64, f64) = (-0.75, -0.25);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EtaMode {
    #[default]
    #[serde(rename = "auto-ntk")]
    AutoNtk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtkRunConfig {
    pub widths: Vec<usize>,
    /// Seeds per width.
    pub seeds: usize,
    /// Base seed for parameter initialisation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::depth")]
    pub depth: usize,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default = "defaults::pt_size")]
    pub pt_size: usize,
    #[serde(default = "defaults::ke_size")]
    pub ke_size: usize,
    /// Seed for `D_PT` and `D_KE`; shared by every cell.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "defaults::pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "defaults::pretrain_loss")]
    pub pretrain_loss: f64,
    #[serde(default = "defaults::ke_steps")]
    pub ke_steps: usize,
    #[serde(default)]
    pub eta: EtaMode,
    /// Leading KE steps used for the exponential-decay fit.
    #[serde(default = "defaults::decay_window")]
    pub decay_window: usize,
}

mod defaults {
    use crate::models::Activation;

    pub fn depth() -> usize {
        1
    }
    pub fn activation() -> Activation {
        Activation::Tanh
    }
    pub fn input_dim() -> usize {
        16
    }
    pub fn pt_size() -> usize {
        32
    }
    pub fn ke_size() -> usize {
        8
    }
    pub fn pretrain_steps() -> usize {
        10_000
    }
    pub fn pretrain_loss() -> f64 {
        1e-6
    }
    pub fn ke_steps() -> usize {
        500
    }
    pub fn decay_window() -> usize {
        200
    }
}

impl NtkRunConfig {
    pub fn new(widths: Vec<usize>, seeds: usize) -> Self {
        Self {
            widths,
            seeds,
            seed: 0,
            depth: defaults::depth(),
            activation: defaults::activation(),
            input_dim: defaults::input_dim(),
            pt_size: defaults::pt_size(),
            ke_size: defaults::ke_size(),
            data_seed: 0,
            pretrain_steps: defaults::pretrain_steps(),
            pretrain_loss: defaults::pretrain_loss(),
            ke_steps: defaults::ke_steps(),
            eta: EtaMode::AutoNtk,
            decay_window: defaults::decay_window(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.widths.len() < 2 {
            return bad(format!("need ≥ 2 widths, got {}", self.widths.len()));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("widths must be positive and strictly increasing: {:?}", self.widths));
        }
        if self.seeds == 0 || self.depth == 0 || self.input_dim == 0 || self.pt_size == 0 || self.ke_size == 0 {
            return bad("seeds, depth, input_dim, pt_size and ke_size must be ≥ 1".into());
        }
        if !(self.pretrain_loss >= 0.0) {
            return bad(format!("pretrain_loss must be ≥ 0, got {}", self.pretrain_loss));
        }
        if self.decay_window < super::MIN_DECAY_STEPS || self.ke_steps < self.decay_window {
            return bad(format!(
                "need {} ≤ decay_window ≤ ke_steps, got {} and {}",
                super::MIN_DECAY_STEPS,
                self.decay_window,
                self.ke_steps
            ));
        }
        Ok(())
    }
}

/// Inputs and targets shared by every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanData {
    pub pt_inputs: Tensor,
    pub pt_targets_f: Vec<f64>,
    pub pt_targets_fprime: Vec<f64>,
    pub ke: RegressionSet,
}

fn sphere_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `D_PT` and `D_KE`: points on the unit sphere, targets uniform in [−1, 1].
pub fn scan_data(cfg: &NtkRunConfig) -> Result<ScanData> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let total = cfg.pt_size + cfg.ke_size;
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(total);
    while points.len() < total {
        let p = sphere_point(&mut rng, cfg.input_dim);
        if !points.contains(&p) {
            points.push(p);
        }
    }
    let mut target = || rng.random_range(-1.0..=1.0);
    let pt_targets_f: Vec<f64> = (0..cfg.pt_size).map(|_| target()).collect();
    let pt_targets_fprime: Vec<f64> = (0..cfg.pt_size).map(|_| target()).collect();
    let ke_targets: Vec<f64> = (0..cfg.ke_size).map(|_| target()).collect();
    let ke_points = points.split_off(cfg.pt_size);
    Ok(ScanData {
        pt_inputs: Tensor::from_rows(&points)?,
        pt_targets_f,
        pt_targets_fprime,
        ke: RegressionSet::new(ke_points, ke_targets)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainStop {
    pub steps: usize,
    pub final_loss: f64,
    /// True when the loss threshold was reached before the step cap.
    pub converged: bool,
    pub eta: f64,
    /// False when the D_PT kernel's λ_min is only an upper bound.
    pub lambda_min_exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub width: usize,
    pub seed: usize,
    pub model_seed: u64,
    /// `‖Δ_{f′}(W; θ₀, T) − Δ_{f′}(W; θ*, T)‖₂`.
    pub norm: f64,
    /// Head-`f` kernel on `W` at `θ₀`; sets `eta`.
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub eta: f64,
    /// Exponential fit of the KE loss from `θ*` over the leading
    /// `decay_window` steps, ignoring losses at the resolution floor.
    pub decay_c: f64,
    pub decay_r2: f64,
    /// Fit quality without dropping losses at the f64 resolution floor.
    pub decay_r2_raw: f64,
    /// Window steps at or below the floor.
    pub decay_excluded: usize,
    /// Head-`f′` kernel on `W` at `θ₀`, recorded only.
    pub lambda_min_fprime: f64,
    pub lambda_max_fprime: f64,
    /// Set when either kernel's smallest eigenvalue is not positive.
    pub flagged: bool,
    pub pretrain: PretrainStop,
    /// `Δ_{f′}(W; θ*, T)`.
    pub ripple_star: Vec<f64>,
    /// `Δ_{f′}(W; θ₀, T)`.
    pub ripple_init: Vec<f64>,
    pub ke_loss_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryPoint {
    pub width: usize,
    /// `‖mean over seeds of Δ_{f′}(W; θ*, T)‖₂`.
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    pub verdict: String,
    pub slope_band: (f64, f64),
    pub ke_steps: usize,
    pub mean_norm_per_width: Vec<CorollaryPoint>,
    pub corollary: Vec<CorollaryPoint>,
    pub pretrain_unconverged: usize,
    pub flagged_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub config: NtkRunConfig,
    pub cells: Vec<CellResult>,
    pub summary: ScanSummary,
}

/// `½(‖f(X) − z_f‖² + ‖f′(X) − z_f′‖²)`.
fn pretrain_loss_grad(model: &Model, data: &ScanData) -> Result<(f64, GradientVector)> {
    let c = model.mlp_config()?;
    let mut g = Graph::with_params(model.params(), |_| true);
    let x = g.constant(data.pt_inputs.clone())?;
    let n = data.pt_targets_f.len();
    let mut total = None;
    for (head, z) in [(Head::F, &data.pt_targets_f), (Head::FPrime, &data.pt_targets_fprime)] {
        let out = head_graph(&mut g, c, x, head)?;
        let z = g.constant(Tensor::new(vec![n, 1], z.clone())?)?;
        let se = g.squared_error(out, z)?;
        total = Some(match total {
            None => se,
            Some(t) => g.add(t, se)?,
        });
    }
    let loss = g.scale(total.expect("two heads"), 0.5)?;
    Ok((g.value(loss).item(), g.backward(loss)?))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One (width, seed) cell.
pub fn run_cell(cfg: &NtkRunConfig, data: &ScanData, width: usize, seed: usize) -> Result<CellResult> {
    let model_seed = crate::seed::mix(cfg.seed, width, seed);
    let mc = MlpConfig {
        activation: cfg.activation,
        ..MlpConfig::new(cfg.input_dim, width, cfg.depth)
    };
    let theta0 = init_model(&ModelConfig::Mlp(mc), model_seed)?;

    let (lambda_min, lambda_max) = spectrum(&empirical_ntk(&theta0, &data.ke.inputs, Head::F)?)?;
    let (lambda_min_fprime, lambda_max_fprime) = spectrum(&empirical_ntk(&theta0, &data.ke.inputs, Head::FPrime)?)?;
    let flagged = lambda_min <= 0.0 || lambda_min_fprime <= 0.0;
    let eta = ntk_learning_rate(lambda_min, lambda_max, width)?;

    // The D_PT kernel can be too ill-conditioned for λ_min to converge; its
    // upper bound only shrinks η, so the step stays stable.
    let pt_spec = spectrum_bound(&joint_ntk(&theta0, &data.pt_inputs, &[Head::F, Head::FPrime])?)?;
    let pt_eta = ntk_learning_rate(pt_spec.lambda_min, pt_spec.lambda_max, width)
        .map_err(|e| e.context("pretraining kernel"))?;
    let pt_cfg = TrainConfig {
        stop_loss: Some(cfg.pretrain_loss),
        ..TrainConfig::gd(cfg.pretrain_steps, pt_eta)
    };
    let (theta_star, pt_curve) =
        optimize(&theta0, &pt_cfg, |m| pretrain_loss_grad(m, data)).map_err(|e| e.context("pretraining"))?;
    let (final_loss, _) = pretrain_loss_grad(&theta_star, data)?;
    let pretrain = PretrainStop {
        steps: pt_curve.len().saturating_sub(usize::from(pt_curve.last().is_some_and(|l| *l <= cfg.pretrain_loss))),
        final_loss,
        converged: final_loss <= cfg.pretrain_loss,
        eta: pt_eta,
        lambda_min_exact: pt_spec.exact,
    };

    let from_init = ripple_delta(&theta0, &data.ke, cfg.ke_steps, eta).map_err(|e| e.context("edit from init"))?;
    let from_star =
        ripple_delta(&theta_star, &data.ke, cfg.ke_steps, eta).map_err(|e| e.context("edit from pretrained"))?;
    let diff: Vec<f64> = from_init.delta.iter().zip(&from_star.delta).map(|(a, b)| a - b).collect();
    let window = &from_star.loss_curve[..cfg.decay_window];
    let decay = fit_exp_decay_above(window, resolution_floor(&data.ke.targets))?;
    let raw = fit_exp_decay(window)?;
    Ok(CellResult {
        width,
        seed,
        model_seed,
        norm: norm(&diff),
        lambda_min,
        lambda_max,
        eta,
        decay_c: decay.c,
        decay_r2: decay.r2,
        decay_r2_raw: raw.r2,
        decay_excluded: decay.excluded,
        lambda_min_fprime,
        lambda_max_fprime,
        flagged,
        pretrain,
        ripple_star: from_star.delta,
        ripple_init: from_init.delta,
        ke_loss_star: from_star.loss_curve,
    })
}

/// Every (width, seed) cell, run in parallel on the current rayon pool and
/// assembled in (width, seed) order.
pub fn width_scan(cfg: &NtkRunConfig) -> Result<ScanResult> {
    cfg.validate()?;
    let data = scan_data(cfg)?;
    let keys: Vec<(usize, usize)> = cfg.widths.iter().flat_map(|&w| (0..cfg.seeds).map(move |s| (w, s))).collect();
    let cells: Vec<CellResult> = keys
        .par_iter()
        .map(|&(w, s)| run_cell(cfg, &data, w, s).map_err(|e| e.context(format!("width {w}, seed {s}"))))
        .collect::<Result<_>>()?;
    let summary = summarize(cfg, &cells)?;
    Ok(ScanResult {
        config: cfg.clone(),
        cells,
        summary,
    })
}

fn summarize(cfg: &NtkRunConfig, cells: &[CellResult]) -> Result<ScanSummary> {
    let pairs: Vec<(usize, f64)> = cells.iter().map(|c| (c.width, c.norm)).collect();
    let LogLogFit {
        slope,
        intercept,
        residual,
    } = fit_loglog_slope(&pairs)?;
    let verdict = if (SLOPE_BAND.0..=SLOPE_BAND.1).contains(&slope) { "pass" } else { "fail" };
    let mut mean_norm_per_width = Vec::new();
    let mut corollary = Vec::new();
    for &w in &cfg.widths {
        let group: Vec<&CellResult> = cells.iter().filter(|c| c.width == w).collect();
        let k = group.len() as f64;
        mean_norm_per_width.push(CorollaryPoint {
            width: w,
            norm: group.iter().map(|c| c.norm).sum::<f64>() / k,
        });
        let mut mean = vec![0.0; cfg.ke_size];
        for c in &group {
            mean.iter_mut().zip(&c.ripple_star).for_each(|(m, v)| *m += v / k);
        }
        corollary.push(CorollaryPoint { width: w, norm: norm(&mean) });
    }
    Ok(ScanSummary {
        slope,
        intercept,
        residual,
        verdict: verdict.into(),
        slope_band: SLOPE_BAND,
        ke_steps: cfg.ke_steps,
        mean_norm_per_width,
        corollary,
        pretrain_unconverged: cells.iter().filter(|c| !c.pretrain.converged).count(),
        flagged_cells: cells.iter().filter(|c| c.flagged).count(),
    })
}

/// Columns: `width, seed, norm, lambda_min, lambda_max, eta, decay_c, decay_r2`.
pub fn write_scan_csv<W: Write>(cells: &[CellResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["width", "seed", "norm", "lambda_min", "lambda_max", "eta", "decay_c", "decay_r2"])?;
    for c in cells {
        w.write_record([
            c.width.to_string(),
            c.seed.to_string(),
            float(c.norm),
            float(c.lambda_min),
            float(c.lambda_max),
            float(c.eta),
            float(c.decay_c),
            float(c.decay_r2),
        ])?;
    }
    w.flush()?;
    Ok(())
}
