//! Convergence benchmarks: descent certification on random quadratics, the
//! fixed-horizon rate on logistic regression, and diminishing-step traces.

use std::ops::Range;
use std::path::Path;

use varprune_core::convergence::{
    descent_check, diminishing_check, estimate_beta, log_log_slope, rate_check, RateRow, SyntheticObjective,
    TotalObjective,
};
use varprune_core::SeededRng;

use crate::error::Result;
use crate::io::write_csv;

#[derive(Debug, Clone, PartialEq)]
pub struct LabConfig {
    pub seed: u64,
    /// Quadratic dimension; the penalty treats all coordinates as one layer.
    pub dim: usize,
    pub instances: usize,
    pub steps: usize,
    /// Spectrum of the random quadratics.
    pub eig_lo: f64,
    pub eig_hi: f64,
    pub descent_lambdas: Vec<f64>,
    pub samples: usize,
    pub features: usize,
    pub flip: f64,
    pub batch: usize,
    pub horizons: Vec<usize>,
    pub rate_lambdas: Vec<f64>,
    pub rate_seeds: usize,
    pub checkpoints: Vec<usize>,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            seed: 0,
            dim: 10,
            instances: 50,
            steps: 1000,
            eig_lo: 0.1,
            eig_hi: 10.0,
            descent_lambdas: vec![0.0, 1e-3],
            samples: 500,
            features: 10,
            flip: 0.1,
            batch: 8,
            horizons: vec![100, 400, 1600, 6400],
            rate_lambdas: vec![0.0, 1e-5],
            rate_seeds: 10,
            checkpoints: vec![100, 1000, 10000],
        }
    }
}

fn layers_for(lambda: f64, dim: usize) -> Vec<Range<usize>> {
    if lambda > 0.0 {
        std::iter::once(0..dim).collect()
    } else {
        Vec::new()
    }
}

/// Plain gradient descent iterates of `obj` from `w0` (every `every`-th point).
fn trajectory(obj: &TotalObjective, w0: &[f64], eta: f64, steps: usize, every: usize) -> Vec<Vec<f64>> {
    let mut w = w0.to_vec();
    let mut g = vec![0.0; w.len()];
    let mut out = vec![w.clone()];
    for t in 1..=steps {
        obj.gradient(&w, &mut g);
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= eta * gi;
        }
        if t % every == 0 {
            out.push(w.clone());
        }
    }
    out
}

/// `beta1 + lambda * beta2_hat`, with `beta2_hat` the empirical smoothness of
/// `psi` on the unpenalized descent trajectory from `w0` plus random probes.
pub fn composite_beta(obj: &TotalObjective, w0: &[f64], steps: usize, rng: &mut SeededRng) -> Result<f64> {
    let beta1 = obj.base.beta1();
    if obj.lambda == 0.0 {
        return Ok(beta1);
    }
    let plain = TotalObjective::plain(obj.base.clone());
    let samples = trajectory(&plain, w0, 1.0 / beta1, steps, (steps / 40).max(1));
    let beta2 = estimate_beta(|w, g| obj.psi_gradient(w, g), &samples, 4, 0.05, rng)?;
    Ok(beta1 + obj.lambda * beta2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentRow {
    pub instance: usize,
    pub lambda: f64,
    pub beta: f64,
    pub steps: usize,
    pub violations: usize,
    pub min_margin: f64,
}

fn random_instance(lab: &LabConfig, instance: usize) -> Result<(SyntheticObjective, Vec<f64>, SeededRng)> {
    let mut rng = SeededRng::new(lab.seed).fork(instance as u64);
    let w_star = rng.draw_normal_f64(lab.dim, 0.0, 1.0)?;
    let q = SyntheticObjective::random_quadratic(lab.dim, lab.eig_lo, lab.eig_hi, &w_star, &mut rng)?;
    let w0: Vec<f64> = w_star.iter().map(|x| x + rng.standard_normal()).collect();
    Ok((q, w0, rng))
}

/// Full-batch descent at `eta = 1/beta` on every random quadratic and lambda.
pub fn descent_suite(lab: &LabConfig) -> Result<Vec<DescentRow>> {
    let mut rows = Vec::new();
    for instance in 0..lab.instances {
        let (q, w0, mut rng) = random_instance(lab, instance)?;
        for &lambda in &lab.descent_lambdas {
            let obj = TotalObjective::new(q.clone(), lambda, layers_for(lambda, lab.dim))?;
            let beta = composite_beta(&obj, &w0, lab.steps, &mut rng)?;
            let report = descent_check(&obj, &w0, 1.0 / beta, beta, lab.steps)?;
            rows.push(DescentRow {
                instance,
                lambda,
                beta,
                steps: report.steps,
                violations: report.violations.len(),
                min_margin: report.margins.iter().cloned().fold(f64::INFINITY, f64::min),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateCurve {
    pub lambda: f64,
    pub beta: f64,
    pub rows: Vec<RateRow>,
    pub slope: f64,
}

/// Logistic regression (plus `psi` over all weights when lambda > 0) at
/// `eta = c / sqrt(T)` with `c = 1/beta`.
pub fn rate_suite(lab: &LabConfig) -> Result<Vec<RateCurve>> {
    let root = SeededRng::new(lab.seed);
    let base = SyntheticObjective::logistic(lab.samples, lab.features, lab.flip, &mut root.fork(0))?;
    let w0 = root.fork(1).draw_normal_f64(lab.features, 0.0, 1.0)?;
    let seeds: Vec<u64> = (0..lab.rate_seeds as u64).collect();
    let mut curves = Vec::new();
    for &lambda in &lab.rate_lambdas {
        let obj = TotalObjective::new(base.clone(), lambda, layers_for(lambda, lab.features))?;
        let beta = composite_beta(&obj, &w0, 2000, &mut root.fork(2))?;
        let rows = rate_check(&obj, &w0, 1.0 / beta, beta, &lab.horizons, &seeds, lab.batch)?;
        let slope = log_log_slope(&rows);
        curves.push(RateCurve { lambda, beta, rows, slope });
    }
    Ok(curves)
}

/// `(steps, weighted-average squared gradient)` per checkpoint.
pub type Trace = Vec<(usize, f64)>;

/// Weighted-average squared gradient under `eta_t = eta0 / (t + 1)`,
/// `eta0 = 1/beta`, on random quadratic instance 0.
pub fn diminishing_suite(lab: &LabConfig) -> Result<Vec<(f64, Trace)>> {
    let (q, w0, mut rng) = random_instance(lab, 0)?;
    let mut out = Vec::new();
    for &lambda in &lab.descent_lambdas {
        let obj = TotalObjective::new(q.clone(), lambda, layers_for(lambda, lab.dim))?;
        let beta = composite_beta(&obj, &w0, lab.steps, &mut rng)?;
        out.push((lambda, diminishing_check(&obj, &w0, 1.0 / beta, beta, &lab.checkpoints)?));
    }
    Ok(out)
}

/// Runs all three benchmarks and writes `descent.csv`, `rate.csv` and
/// `diminishing.csv` under `dir`.
pub fn run_lab(lab: &LabConfig, dir: &Path) -> Result<()> {
    let descent: Vec<[String; 6]> = descent_suite(lab)?
        .iter()
        .map(|r| {
            [
                r.instance.to_string(),
                r.lambda.to_string(),
                r.beta.to_string(),
                r.steps.to_string(),
                r.violations.to_string(),
                r.min_margin.to_string(),
            ]
        })
        .collect();
    write_csv(&dir.join("descent.csv"), ["instance", "lambda", "beta", "steps", "violations", "min_margin"], &descent)?;

    let mut rate = Vec::new();
    for c in rate_suite(lab)? {
        for r in &c.rows {
            rate.push([
                c.lambda.to_string(),
                r.horizon.to_string(),
                r.eta.to_string(),
                r.mean_avg_sq_grad.to_string(),
                r.diverged.to_string(),
                c.slope.to_string(),
            ]);
        }
    }
    write_csv(&dir.join("rate.csv"), ["lambda", "horizon", "eta", "mean_avg_sq_grad", "diverged", "slope"], &rate)?;

    let mut dim = Vec::new();
    for (lambda, trace) in diminishing_suite(lab)? {
        for (t, v) in trace {
            dim.push([lambda.to_string(), t.to_string(), v.to_string()]);
        }
    }
    write_csv(&dir.join("diminishing.csv"), ["lambda", "horizon", "weighted_avg_sq_grad"], &dim)
}
