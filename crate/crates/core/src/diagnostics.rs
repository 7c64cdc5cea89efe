//! Weight-distribution statistics and loss-landscape sharpness.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::math::{population_variance, SeededRng};
use crate::model::{Batch, LossKind, Network, ParamSet};
use crate::reg::{self, RegConfig};

/// Population variance of every prunable weight pooled into one vector.
/// Raw values, not smoothed magnitudes.
pub fn model_variance(params: &ParamSet) -> Result<f64> {
    let values: Vec<f32> = params.prunable_values().collect();
    if values.is_empty() {
        return Err(Error::Precondition("no prunable weights".into()));
    }
    population_variance(&values)
}

/// Values outside the outermost edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Overflow {
    #[default]
    Reject,
    /// Count them in the first or last bin.
    Clamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Bin `i` is `[edges[i], edges[i + 1])`; the last bin is closed.
    pub fn build(values: impl IntoIterator<Item = f64>, edges: &[f64], overflow: Overflow) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Precondition("histogram needs at least two edges".into()));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Precondition("histogram edges must be strictly increasing".into()));
        }
        let bins = edges.len() - 1;
        let (lo, hi) = (edges[0], edges[bins]);
        let mut counts = vec![0u64; bins];
        for v in values {
            let bin = if v < lo || v > hi {
                match overflow {
                    Overflow::Reject => {
                        return Err(Error::Precondition(format!("value {v} outside [{lo}, {hi}]")));
                    }
                    Overflow::Clamp if v < lo => 0,
                    Overflow::Clamp => bins - 1,
                }
            } else {
                (edges.partition_point(|&e| e <= v) - 1).min(bins - 1)
            };
            counts[bin] += 1;
        }
        Ok(Histogram { edges: edges.to_vec(), counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// `bins + 1` equally spaced edges from `lo` to `hi`.
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 || !(lo < hi) {
        return Err(Error::Precondition(format!("cannot split [{lo}, {hi}] into {bins} bins")));
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    Ok(edges)
}

/// Histogram of the prunable weights.
pub fn weight_histogram(params: &ParamSet, edges: &[f64], overflow: Overflow) -> Result<Histogram> {
    Histogram::build(params.prunable_values().map(f64::from), edges, overflow)
}

/// A differentiable scalar field over a flat parameter vector.
pub trait GradientField {
    fn dim(&self) -> usize;
    /// Writes the gradient at `w` into `out` and returns the value.
    fn gradient(&mut self, w: &[f64], out: &mut [f64]) -> Result<f64>;
}

/// Mean batch loss of a network, optionally with `lambda * psi` added.
pub struct NetLoss<'a> {
    net: &'a Network,
    batch: &'a Batch,
    kind: LossKind,
    penalty: Option<(f64, RegConfig, Vec<Range<usize>>)>,
    scale: f64,
}

impl<'a> NetLoss<'a> {
    pub fn new(net: &'a Network, batch: &'a Batch) -> Self {
        NetLoss { net, batch, kind: batch.loss_kind(), penalty: None, scale: 1.0 }
    }

    /// Adds `reg.lambda * psi` over the entries of `params` selected by `reg`.
    pub fn with_penalty(mut self, params: &ParamSet, reg: &RegConfig) -> Result<Self> {
        let ranges = reg.included_ranges(params)?;
        self.penalty = Some((reg.lambda, reg.clone(), ranges));
        Ok(self)
    }

    /// Multiplies the whole objective by `scale`.
    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

impl GradientField for NetLoss<'_> {
    fn dim(&self) -> usize {
        self.net.num_params()
    }

    fn gradient(&mut self, w: &[f64], out: &mut [f64]) -> Result<f64> {
        let mut value = self.net.loss_flat(w, self.batch, self.kind, Some(out))?;
        if let Some((lambda, cfg, ranges)) = &self.penalty {
            value += lambda * reg::add_psi_grad_flat(w, ranges, cfg.r, cfg.epsilon, *lambda, out)?;
        }
        if self.scale != 1.0 {
            out.iter_mut().for_each(|g| *g *= self.scale);
            value *= self.scale;
        }
        Ok(value)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1e-3 * |w| / |v|`, floored at `1e-6`.
pub fn default_delta(w: &[f64], v: &[f64]) -> f64 {
    let nv = norm(v);
    if nv == 0.0 {
        return 1e-6;
    }
    (1e-3 * norm(w) / nv).max(1e-6)
}

/// Central-difference Hessian-vector product
/// `(grad(w + delta v) - grad(w - delta v)) / (2 delta)`.
pub fn hvp(field: &mut impl GradientField, w: &[f64], v: &[f64], delta: f64) -> Result<Vec<f64>> {
    if !(delta > 0.0) {
        return Err(Error::Precondition(format!("hvp step {delta} must be positive")));
    }
    if w.len() != field.dim() || v.len() != w.len() {
        return Err(Error::Dimension(format!("hvp on {} with w {} and v {}", field.dim(), w.len(), v.len())));
    }
    if norm(v) == 0.0 {
        return Err(Error::Precondition("hvp direction must be nonzero".into()));
    }
    let mut probe: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + delta * b).collect();
    let mut up = vec![0.0; w.len()];
    field.gradient(&probe, &mut up)?;
    for ((p, a), b) in probe.iter_mut().zip(w).zip(v) {
        *p = a - delta * b;
    }
    let mut down = vec![0.0; w.len()];
    field.gradient(&probe, &mut down)?;
    let out: Vec<f64> = up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * delta)).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite Hessian-vector product"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessProbe {
    /// Finite-difference step; `None` uses [`default_delta`].
    pub delta: Option<f64>,
    pub max_iters: usize,
    /// Relative change of the Rayleigh quotient that counts as converged.
    pub tol: f64,
}

impl Default for SharpnessProbe {
    fn default() -> Self {
        SharpnessProbe { delta: None, max_iters: 200, tol: 1e-6 }
    }
}

impl SharpnessProbe {
    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(Error::Config(format!("probe delta {d} must be positive")));
            }
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::Config("probe needs tol > 0 and max_iters >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration for the dominant eigenvalue of a symmetric operator,
/// returning the Rayleigh quotient.
pub fn power_iteration(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    start: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<EigenEstimate> {
    let n0 = norm(start);
    if !(n0 > 0.0) || !n0.is_finite() {
        return Err(Error::Precondition("power iteration needs a nonzero start vector".into()));
    }
    let mut v: Vec<f64> = start.iter().map(|x| x / n0).collect();
    let mut previous: Option<f64> = None;
    let mut value = 0.0;
    for it in 1..=max_iters {
        let hv = apply(&v)?;
        value = dot(&v, &hv);
        let nh = norm(&hv);
        if nh == 0.0 {
            return Ok(EigenEstimate { value: 0.0, iterations: it, converged: true });
        }
        if let Some(prev) = previous {
            if (value - prev).abs() <= tol * value.abs() {
                return Ok(EigenEstimate { value, iterations: it, converged: true });
            }
        }
        previous = Some(value);
        v = hv.into_iter().map(|x| x / nh).collect();
    }
    Ok(EigenEstimate { value, iterations: max_iters, converged: false })
}

/// Largest-magnitude Hessian eigenvalue of `field` at `w`, by power iteration
/// on finite-difference Hessian-vector products from a random start.
pub fn top_hessian_eigenvalue(
    field: &mut impl GradientField,
    w: &[f64],
    probe: &SharpnessProbe,
    rng: &mut SeededRng,
) -> Result<EigenEstimate> {
    probe.validate()?;
    let start = rng.draw_normal_f64(w.len(), 0.0, 1.0)?;
    power_iteration(
        |v| {
            let mut delta = probe.delta.unwrap_or_else(|| default_delta(w, v));
            let mut failures = 0;
            loop {
                match hvp(field, w, v, delta) {
                    Ok(h) => return Ok(h),
                    Err(Error::Numeric { .. }) if failures < 3 => {
                        failures += 1;
                        delta *= 0.5;
                    }
                    Err(e) => return Err(e),
                }
            }
        },
        &start,
        probe.max_iters,
        probe.tol,
    )
}

/// `s_0 = x_0`, `s_t = gamma s_{t-1} + (1 - gamma) x_t`.
pub fn ema(series: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Precondition(format!("ema gamma {gamma} must lie in (0, 1)")));
    }
    let (&first, rest) = series.split_first().ok_or_else(|| Error::Precondition("ema of an empty series".into()))?;
    let mut out = Vec::with_capacity(series.len());
    out.push(first);
    let mut s = first;
    for &x in rest {
        s = gamma * s + (1.0 - gamma) * x;
        out.push(s);
    }
    Ok(out)
}
