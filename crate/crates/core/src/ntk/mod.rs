//! Wide-network verification harness.
//!
//! Runs paired knowledge-editing processes on a two-head MLP: the edit trains
//! head `f` on `D_KE = (W, Z)` by full-batch GD and the ripple is read off
//! head `f′` on `W`. One run starts from the random init `θ₀`, the other from
//! `θ*` pretrained on `D_PT`. The norm of the difference between the two
//! ripples is expected to shrink like `1/√n` in the width `n`.

mod scan;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError, Tensor};
use crate::error::{Error, Result};
use crate::models::{head_graph, mlp_forward, mlp_loss_grad, optimize, Head, Heads, Model, RegressionSet, TrainConfig};

pub use scan::{
    run_cell, scan_data, width_scan, write_scan_csv, CellResult, CorollaryPoint, EtaMode, NtkRunConfig, PretrainStop, ScanData,
    ScanResult, ScanSummary, SLOPE_BAND,
};

const MAX_POWER_ITERS: usize = 100_000;
const POWER_TOL: f64 = 1e-10;

/// Jacobian of the chosen heads on `inputs`: one row per (head, input),
/// heads outermost, columns in canonical parameter order.
pub fn jacobian(model: &Model, inputs: &Tensor, heads: &[Head]) -> Result<Tensor> {
    let c = model.mlp_config()?;
    let (n, d) = inputs.dims2()?;
    if n == 0 || d != c.input_dim {
        return Err(Error::InvalidInput(format!(
            "inputs must be [≥1, {}], got {:?}",
            c.input_dim,
            inputs.shape()
        )));
    }
    let p = model.param_count();
    let mut data = Vec::with_capacity(heads.len() * n * p);
    for &h in heads {
        for i in 0..n {
            let mut g = Graph::with_params(model.params(), |_| true);
            let x = g.constant(Tensor::new(vec![1, d], inputs.row(i).to_vec())?)?;
            let out = head_graph(&mut g, c, x, h)?;
            let out = g.sum(out)?;
            let grad = g.backward(out)?;
            if grad.entries().iter().any(|v| !v.is_finite()) {
                return Err(GraphError::NonFinite("jacobian").into());
            }
            data.extend_from_slice(grad.entries());
        }
    }
    Ok(Tensor::new(vec![heads.len() * n, p], data)?)
}

/// `(1/s) J Jᵀ` with `s` the row scale; exactly symmetric.
fn gram(j: &Tensor, s: f64) -> Result<Tensor> {
    let (r, _) = j.dims2()?;
    let mut k = Tensor::zeros(&[r, r]);
    for a in 0..r {
        for b in a..r {
            let v: f64 = j.row(a).iter().zip(j.row(b)).map(|(x, y)| x * y).sum::<f64>() / s;
            k.data_mut()[a * r + b] = v;
            k.data_mut()[b * r + a] = v;
        }
    }
    Ok(k)
}

/// Empirical tangent kernel `(1/n) J Jᵀ` of one head, `n` the hidden width.
pub fn empirical_ntk(model: &Model, inputs: &Tensor, head: Head) -> Result<Tensor> {
    let j = jacobian(model, inputs, &[head])?;
    gram(&j, model.width() as f64)
}

/// Kernel of the stacked outputs of several heads.
pub fn joint_ntk(model: &Model, inputs: &Tensor, heads: &[Head]) -> Result<Tensor> {
    let j = jacobian(model, inputs, heads)?;
    gram(&j, model.width() as f64)
}

fn matvec(k: &Tensor, v: &[f64], shift: f64, sign: f64, out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &k.data()[i * n..(i + 1) * n];
        *o = shift * v[i] + sign * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Dominant eigenvalue of `shift·I + sign·K`. Successive Rayleigh changes
/// shrink geometrically with ratio `q`, so `δ/(1 − q)` estimates the
/// remaining error; iteration stops once that is within `POWER_TOL`
/// relative. Without convergence the last quotient is returned with
/// `false`; for a PSD operator it never exceeds the true value.
fn power(k: &Tensor, shift: f64, sign: f64, scale: f64) -> (f64, bool) {
    let n = k.shape()[0];
    let roundoff = 8.0 * n as f64 * f64::EPSILON * scale;
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 1.0 / (i as f64 + 2.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut w = vec![0.0; n];
    let (mut prev, mut prev_delta) = (f64::NAN, f64::NAN);
    for _ in 0..MAX_POWER_ITERS {
        matvec(k, &v, shift, sign, &mut w);
        let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let delta = (lambda - prev).abs();
        if delta <= roundoff {
            return (lambda, true);
        }
        let q = delta / prev_delta;
        if q < 1.0 && delta / (1.0 - q) <= POWER_TOL * lambda.abs() {
            return (lambda, true);
        }
        (prev, prev_delta) = (lambda, delta);
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return (0.0, true);
        }
        v.iter_mut().zip(&w).for_each(|(a, b)| *a = b / wn);
    }
    (prev, false)
}

fn converged((lambda, ok): (f64, bool)) -> Result<f64> {
    if ok {
        Ok(lambda)
    } else {
        Err(Error::NonConvergence(MAX_POWER_ITERS))
    }
}

/// Extreme eigenvalues `(λ_min, λ_max)` of a symmetric matrix by power
/// iteration on `K` and on `λ_max·I − K`.
pub fn spectrum(k: &Tensor) -> Result<(f64, f64)> {
    check_symmetric(k)?;
    let scale = k.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Ok((0.0, 0.0));
    }
    let lambda_max = top(k, scale)?;
    let gap = converged(power(k, lambda_max, -1.0, scale))?;
    Ok((lambda_max - gap, lambda_max))
}

/// `λ_max` and an upper bound on `λ_min` for a PSD matrix. The bound is the
/// converged value when `exact` is set, otherwise the estimate after the
/// iteration cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBound {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub exact: bool,
}

pub fn spectrum_bound(k: &Tensor) -> Result<SpectrumBound> {
    check_symmetric(k)?;
    let scale = k.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Ok(SpectrumBound {
            lambda_min: 0.0,
            lambda_max: 0.0,
            exact: true,
        });
    }
    let lambda_max = top(k, scale)?;
    let (gap, exact) = power(k, lambda_max, -1.0, scale);
    Ok(SpectrumBound {
        lambda_min: lambda_max - gap,
        lambda_max,
        exact,
    })
}


fn check_symmetric(k: &Tensor) -> Result<()> {
    let (r, c) = k.dims2()?;
    if r != c || r == 0 {
        return Err(Error::InvalidInput(format!("spectrum needs a square matrix, got {:?}", k.shape())));
    }
    let d = k.data();
    for i in 0..r {
        for j in 0..i {
            let (a, b) = (d[i * r + j], d[j * r + i]);
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::InvalidInput("spectrum needs a symmetric matrix".into()));
            }
        }
    }
    if !k.is_finite() {
        return Err(GraphError::NonFinite("spectrum").into());
    }
    Ok(())
}

/// Largest eigenvalue: the dominant one of `K` if it is non-negative,
/// otherwise `μ` plus the dominant one of the PSD `K − μI`.
fn top(k: &Tensor, scale: f64) -> Result<f64> {
    let mu = converged(power(k, 0.0, 1.0, scale))?;
    if mu >= 0.0 {
        Ok(mu)
    } else {
        Ok(mu + converged(power(k, -mu, 1.0, scale))?)
    }
}

/// Largest eigenvalue alone; converges at the rate of the top gap only.
pub fn lambda_max(k: &Tensor) -> Result<f64> {
    check_symmetric(k)?;
    let scale = k.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Ok(0.0);
    }
    top(k, scale)
}

/// `η = 2 / ((λ_min + λ_max) n)`.
pub fn ntk_learning_rate(lambda_min: f64, lambda_max: f64, n: usize) -> Result<f64> {
    if !(lambda_min > 0.0 && lambda_max.is_finite() && lambda_max >= lambda_min) {
        return Err(Error::InvalidInput(format!(
            "learning rate needs 0 < λ_min ≤ λ_max < ∞, got ({lambda_min}, {lambda_max})"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidInput("width must be ≥ 1".into()));
    }
    Ok(2.0 / ((lambda_min + lambda_max) * n as f64))
}

/// Learning rate for an edit on `data` from the kernel of head `f` at the
/// model's current parameters.
pub fn auto_ntk_rate(model: &Model, data: &RegressionSet) -> Result<f64> {
    let k = empirical_ntk(model, &data.inputs, Head::F)?;
    let (lo, hi) = spectrum(&k)?;
    ntk_learning_rate(lo, hi, model.width())
}

#[derive(Debug, Clone)]
pub struct RippleDelta {
    /// `f′(W)` after minus before.
    pub delta: Vec<f64>,
    /// Head-`f` objective `½‖f(W) − Z‖²` before each step.
    pub loss_curve: Vec<f64>,
    pub model: Model,
}

/// Trains head `f` on `data` for exactly `steps` GD steps at rate `eta` and
/// reports how head `f′` moved on the same inputs.
pub fn ripple_delta(model: &Model, data: &RegressionSet, steps: usize, eta: f64) -> Result<RippleDelta> {
    data.check_mapping()?;
    let cfg = TrainConfig::gd(steps, eta);
    let trainable = model.select(&cfg.params)?;
    let before = mlp_forward(model, &data.inputs)?;
    let (edited, loss_curve) = optimize(model, &cfg, |m| mlp_loss_grad(m, data, Heads::F, &trainable))?;
    let after = mlp_forward(&edited, &data.inputs)?;
    let delta = (0..data.len())
        .map(|i| after.row(i)[Head::FPrime.index()] - before.row(i)[Head::FPrime.index()])
        .collect();
    Ok(RippleDelta {
        delta,
        loss_curve,
        model: edited,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Sum of squared residuals in log space.
    pub residual: f64,
}

/// Ordinary least squares `y = slope·x + intercept`; returns the fit and
/// the coefficient of determination.
fn least_squares(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    // A flat series fitted exactly counts as a perfect fit.
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, intercept, ss_res, r2))
}

/// Least squares on `(ln n, ln norm)`.
pub fn fit_loglog_slope(pairs: &[(usize, f64)]) -> Result<LogLogFit> {
    let mut widths: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    widths.sort_unstable();
    widths.dedup();
    if widths.len() < 2 {
        return Err(Error::InsufficientRows {
            need: 2,
            have: widths.len(),
        });
    }
    if let Some(&(n, v)) = pairs.iter().find(|(n, v)| *n == 0 || !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "log-log fit needs positive widths and norms, got ({n}, {v})"
        )));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, residual, _) = least_squares(&xs, &ys)?;
    Ok(LogLogFit {
        slope,
        intercept,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Decay rate `c` in `loss ≈ A e^{−ct}`.
    pub c: f64,
    pub r2: f64,
    /// Steps dropped for having a non-positive loss.
    pub excluded: usize,
}

pub const MIN_DECAY_STEPS: usize = 10;

/// Linear regression of `ln loss_t` on `t`; non-positive losses are
/// excluded and counted.
pub fn fit_exp_decay(curve: &[f64]) -> Result<DecayFit> {
    fit_exp_decay_above(curve, 0.0)
}

/// As [`fit_exp_decay`], treating every loss `≤ floor` as zero.
pub fn fit_exp_decay_above(curve: &[f64], floor: f64) -> Result<DecayFit> {
    if curve.len() < MIN_DECAY_STEPS {
        return Err(Error::InsufficientRows {
            need: MIN_DECAY_STEPS,
            have: curve.len(),
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = curve
        .iter()
        .enumerate()
        .filter(|(_, l)| **l > floor && l.is_finite())
        .map(|(t, l)| (t as f64, l.ln()))
        .unzip();
    if xs.len() < 2 {
        return Err(Error::InsufficientRows { need: 2, have: xs.len() });
    }
    let (slope, _, _, r2) = least_squares(&xs, &ys)?;
    Ok(DecayFit {
        c: -slope,
        r2,
        excluded: curve.len() - xs.len(),
    })
}

/// Largest `½‖f − Z‖²` that is indistinguishable from zero in f64: every
/// residual within 8 ulps of `max(1, max|z|)`.
pub fn resolution_floor(targets: &[f64]) -> f64 {
    let s = targets.iter().fold(1.0f64, |m, z| m.max(z.abs()));
    0.5 * targets.len() as f64 * (8.0 * f64::EPSILON * s).powi(2)
}
