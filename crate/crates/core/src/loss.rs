//! Training objective: compressed-magnitude L1, anti-wrapped phase L1 and
//! complex-spectrum MSE, combined linearly.

use std::f64::consts::PI;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Tape, Var};
use crate::model::ModelOutput;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossDomain {
    /// Magnitude L1 on the compressed (mask-domain) magnitude.
    #[default]
    Compressed,
    /// Magnitude L1 on the decompressed magnitude.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Boost clean targets with the same band gains as the input.
    pub pcs_targets: bool,
    pub loss_domain: LossDomain,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { lambda1: w.lambda1, lambda2: w.lambda2, lambda3: w.lambda3, pcs_targets: true, loss_domain: LossDomain::Compressed }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, lambda3: self.lambda3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.5, lambda3: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{n} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub magnitude: f64,
    pub phase: f64,
    pub complex: f64,
}

/// `|t - 2 pi round(t / 2 pi)|` with ties rounded to even; lies in `[0, pi]`.
pub fn anti_wrap(t: f64) -> f64 {
    (t - 2.0 * PI * (t / (2.0 * PI)).round_ties_even()).abs()
}

fn same_shape(a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::input("cannot average over an empty array"));
    }
    Ok(())
}

pub fn magnitude_loss(y_m: &Array, x_m: &Array) -> Result<f64> {
    same_shape(y_m, x_m)?;
    Ok((y_m - x_m).mapv(f64::abs).mean().unwrap())
}

pub fn phase_loss(y_p: &Array, x_p: &Array) -> Result<f64> {
    same_shape(y_p, x_p)?;
    Ok((y_p - x_p).mapv(anti_wrap).mean().unwrap())
}

pub fn complex_loss(y_m: &Array, y_p: &Array, x_m: &Array, x_p: &Array) -> Result<f64> {
    for a in [y_p, x_m, x_p] {
        same_shape(y_m, a)?;
    }
    let re = y_m * &y_p.mapv(f64::cos) - x_m * &x_p.mapv(f64::cos);
    let im = y_m * &y_p.mapv(f64::sin) - x_m * &x_p.mapv(f64::sin);
    Ok(re.mapv(|v| v * v).mean().unwrap() + im.mapv(|v| v * v).mean().unwrap())
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    if ![parts.magnitude, parts.phase, parts.complex].iter().all(|v| v.is_finite()) {
        return Err(Error::Training { step: None, message: format!("non-finite loss parts {parts:?}") });
    }
    Ok(weights.lambda1 * parts.magnitude + weights.lambda2 * parts.phase + weights.lambda3 * parts.complex)
}

/// Differentiable anti-wrap: the `2 pi k` offset is piecewise constant.
pub fn anti_wrap_var(t: Var<'_>) -> Var<'_> {
    let offsets = t.value().mapv(|v| 2.0 * PI * (v / (2.0 * PI)).round_ties_even());
    (t - t.tape().constant(offsets)).abs()
}

/// Targets for one batch in the compressed domain, `[B, F, T]`.
#[derive(Clone, Debug)]
pub struct Targets {
    pub magnitude: ArrayD<f64>,
    pub phase: ArrayD<f64>,
}

/// Weighted objective on the tape, plus its parts as plain numbers.
pub fn model_loss<'t>(tape: &'t Tape, out: &ModelOutput<'t>, targets: &Targets, cfg: &LossConfig) -> Result<(Var<'t>, LossParts)> {
    cfg.weights().validate()?;
    let shape = out.magnitude.shape();
    if targets.magnitude.shape() != shape.as_slice() || targets.phase.shape() != shape.as_slice() {
        return Err(Error::input(format!(
            "targets {:?} do not match model output {shape:?}",
            targets.magnitude.shape()
        )));
    }
    let y_m = tape.constant(targets.magnitude.clone());
    let y_p = tape.constant(targets.phase.clone());
    let x_lin = out.magnitude.exp().offset(-1.0);
    let y_lin = tape.constant(targets.magnitude.mapv(f64::exp_m1));

    let l_mag = match cfg.loss_domain {
        LossDomain::Compressed => (y_m - out.magnitude).abs().mean_all(),
        LossDomain::Linear => (y_lin - x_lin).abs().mean_all(),
    };
    let l_pha = anti_wrap_var(y_p - out.phase).mean_all();
    let re = y_lin * y_p.cos() - x_lin * out.phase.cos();
    let im = y_lin * y_p.sin() - x_lin * out.phase.sin();
    let l_com = re.square().mean_all() + im.square().mean_all();

    let parts = LossParts { magnitude: l_mag.value()[[]], phase: l_pha.value()[[]], complex: l_com.value()[[]] };
    total_loss(&parts, &cfg.weights())?;
    let total = l_mag.scale(cfg.lambda1) + l_pha.scale(cfg.lambda2) + l_com.scale(cfg.lambda3);
    Ok((total, parts))
}
