//! Penalty that rewards high per-layer weight variance.
//!
//! Each included parameter tensor is one layer. Its weights are mapped through
//! the smoothed magnitude `sqrt(w^2 + r)`, and the layer contributes
//! `1 / (Var + epsilon)` where `Var` is the population variance of those
//! magnitudes. Minimizing the sum therefore widens each layer's magnitude
//! distribution.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::ParamSet;

/// Which parameter entries the penalty sees.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Include {
    /// Entries flagged prunable (dense weight matrices by default).
    #[default]
    Prunable,
    All,
    Names(Vec<String>),
}

impl Include {
    pub fn admits(&self, name: &str, prunable: bool) -> bool {
        match self {
            Include::Prunable => prunable,
            Include::All => true,
            Include::Names(names) => names.iter().any(|n| n == name),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegConfig {
    pub lambda: f64,
    pub r: f64,
    pub epsilon: f64,
    pub include: Include,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig { lambda: 0.0, r: 1e-8, epsilon: 1e-8, include: Include::Prunable }
    }
}

impl RegConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        RegConfig { lambda, ..RegConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        if !(self.r > 0.0) || !self.r.is_finite() {
            return Err(Error::Config(format!("r must be positive, got {}", self.r)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Flat index ranges (see [`ParamSet::to_flat`]) of the included entries.
    pub fn included_ranges(&self, params: &ParamSet) -> Result<Vec<Range<usize>>> {
        self.validate()?;
        let ranges: Vec<_> = params
            .entries()
            .iter()
            .zip(params.offsets())
            .filter(|(e, _)| self.include.admits(&e.name, e.prunable))
            .map(|(e, o)| o..o + e.value.len())
            .collect();
        if ranges.is_empty() {
            return Err(Error::Config("variance penalty includes no parameter entries".into()));
        }
        Ok(ranges)
    }
}

pub fn smoothed_abs(w: f64, r: f64) -> f64 {
    (w * w + r).sqrt()
}

fn smoothed_stats(w: &[f64], r: f64, scratch: &mut Vec<f64>) -> (f64, f64) {
    scratch.clear();
    scratch.extend(w.iter().map(|&v| smoothed_abs(v, r)));
    let n = scratch.len() as f64;
    let mean = scratch.iter().sum::<f64>() / n;
    let var = scratch.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var)
}

/// `1 / (Var(sqrt(w^2 + r)) + epsilon)` for one layer.
pub fn layer_penalty(w: &[f64], r: f64, epsilon: f64) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::Precondition("empty layer".into()));
    }
    let (_, var) = smoothed_stats(w, r, &mut Vec::with_capacity(w.len()));
    Ok(1.0 / (var + epsilon))
}

/// Writes the gradient of [`layer_penalty`] into `out` and returns the penalty.
///
/// `d/dw_i = -(2/n) (s_i - mean(s)) (w_i / s_i) / (Var(s) + epsilon)^2` with
/// `s_i = sqrt(w_i^2 + r)`.
pub fn layer_penalty_grad(w: &[f64], r: f64, epsilon: f64, out: &mut [f64]) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::Precondition("empty layer".into()));
    }
    if out.len() != w.len() {
        return Err(Error::Dimension(format!("gradient buffer of {} for {} weights", out.len(), w.len())));
    }
    let mut s = Vec::with_capacity(w.len());
    let (mean, var) = smoothed_stats(w, r, &mut s);
    let denom = var + epsilon;
    let coef = -2.0 / (w.len() as f64 * denom * denom);
    for ((o, &wi), &si) in out.iter_mut().zip(w).zip(&s) {
        *o = coef * (si - mean) * (wi / si);
    }
    Ok(1.0 / denom)
}

/// Penalty over a flat parameter vector split into `layers`.
pub fn psi_flat(w: &[f64], layers: &[Range<usize>], r: f64, epsilon: f64) -> Result<f64> {
    layers.iter().map(|l| layer_penalty(&w[l.clone()], r, epsilon)).sum()
}

/// Adds `scale * grad psi` into `out`; coordinates outside `layers` are untouched.
pub fn add_psi_grad_flat(
    w: &[f64],
    layers: &[Range<usize>],
    r: f64,
    epsilon: f64,
    scale: f64,
    out: &mut [f64],
) -> Result<f64> {
    let mut total = 0.0;
    let mut buf = Vec::new();
    for l in layers {
        buf.resize(l.len(), 0.0);
        total += layer_penalty_grad(&w[l.clone()], r, epsilon, &mut buf)?;
        for (o, g) in out[l.clone()].iter_mut().zip(&buf) {
            *o += scale * g;
        }
    }
    Ok(total)
}

pub fn psi(params: &ParamSet, cfg: &RegConfig) -> Result<f64> {
    let layers = cfg.included_ranges(params)?;
    psi_flat(&params.to_flat(), &layers, cfg.r, cfg.epsilon)
}

/// Gradient of [`psi`] in flat order; zero on excluded entries.
pub fn psi_grad(params: &ParamSet, cfg: &RegConfig) -> Result<Vec<f64>> {
    let layers = cfg.included_ranges(params)?;
    let w = params.to_flat();
    let mut out = vec![0.0; w.len()];
    add_psi_grad_flat(&w, &layers, cfg.r, cfg.epsilon, 1.0, &mut out)?;
    Ok(out)
}
