//! Empirical checks of SGD convergence on `L + lambda * psi`.
//!
//! Objectives here have known smoothness constants so step-size conditions
//! can be met exactly: quadratics `0.5 w^T A w - b^T w` with analytic
//! gradients and logistic regression on a seeded dataset.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::math::SeededRng;
use crate::reg;

/// Safety factor applied to empirical Lipschitz estimates.
pub const BETA_SAFETY: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticObjective {
    /// `0.5 w^T A w - b^T w`, `A` symmetric PSD (row-major `d x d`).
    Quadratic { a: Vec<f64>, b: Vec<f64>, dim: usize, beta1: f64, lower_bound: Option<f64> },
    /// Mean logistic loss `log(1 + exp(-y x^T w))`, labels in `{-1, +1}`.
    Logistic { x: Vec<f64>, y: Vec<f64>, samples: usize, dim: usize, beta1: f64 },
}

fn lambda_max(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

impl SyntheticObjective {
    /// Quadratic with `beta1 = lambda_max(A)`. The lower bound is filled when
    /// `b` lies in the range of `A` (checked by least squares).
    pub fn quadratic(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let dim = b.len();
        if dim == 0 || a.len() != dim * dim {
            return Err(Error::Dimension(format!("quadratic with {} matrix entries and {dim} offsets", a.len())));
        }
        for i in 0..dim {
            for j in 0..i {
                if (a[i * dim + j] - a[j * dim + i]).abs() > 1e-12 {
                    return Err(Error::Precondition(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        let m = DMatrix::from_row_slice(dim, dim, &a);
        let eig = SymmetricEigen::new(m.clone());
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let beta1 = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min_eig < -1e-10 * beta1.abs().max(1.0) {
            return Err(Error::Precondition(format!("matrix has negative eigenvalue {min_eig}")));
        }
        let lower_bound = m
            .clone()
            .pseudo_inverse(1e-12)
            .ok()
            .map(|pinv| pinv * DVector::from_row_slice(&b))
            .filter(|w| (&m * w - DVector::from_row_slice(&b)).norm() <= 1e-8 * (1.0 + w.norm()))
            .map(|w| -0.5 * w.dot(&DVector::from_row_slice(&b)));
        Ok(SyntheticObjective::Quadratic { a, b, dim, beta1, lower_bound })
    }

    /// Random PSD quadratic with eigenvalues drawn uniformly from `[lo, hi]`
    /// (the largest pinned to `hi`) and minimizer `w_star`.
    pub fn random_quadratic(dim: usize, lo: f64, hi: f64, w_star: &[f64], rng: &mut SeededRng) -> Result<Self> {
        if !(0.0 <= lo && lo <= hi && hi > 0.0) || w_star.len() != dim || dim == 0 {
            return Err(Error::Precondition(format!("random quadratic spectrum [{lo}, {hi}] in {dim} dims")));
        }
        let g = DMatrix::from_vec(dim, dim, rng.draw_normal_f64(dim * dim, 0.0, 1.0)?);
        let q = g.qr().q();
        let mut eig: Vec<f64> = (0..dim).map(|_| rng.uniform(lo, hi)).collect();
        eig[0] = hi;
        let a = &q * DMatrix::from_diagonal(&DVector::from_vec(eig)) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let b = &a * DVector::from_row_slice(w_star);
        let rows: Vec<f64> = (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect();
        SyntheticObjective::quadratic(rows, b.iter().cloned().collect())
    }

    /// Logistic regression on `samples` standard-normal feature vectors with
    /// labels from a random linear teacher, each flipped with probability
    /// `flip`. `beta1 = lambda_max(X^T X) / (4 M)`.
    pub fn logistic(samples: usize, dim: usize, flip: f64, rng: &mut SeededRng) -> Result<Self> {
        if samples < 2 || dim == 0 || !(0.0..=0.5).contains(&flip) {
            return Err(Error::Precondition(format!("logistic dataset {samples}x{dim}, flip {flip}")));
        }
        let teacher = rng.draw_normal_f64(dim, 0.0, 1.0)?;
        let x = rng.draw_normal_f64(samples * dim, 0.0, 1.0)?;
        let y = (0..samples)
            .map(|i| {
                let s: f64 = x[i * dim..(i + 1) * dim].iter().zip(&teacher).map(|(a, b)| a * b).sum();
                let label = if s >= 0.0 { 1.0 } else { -1.0 };
                if rng.uniform(0.0, 1.0) < flip {
                    -label
                } else {
                    label
                }
            })
            .collect();
        let xm = DMatrix::from_row_slice(samples, dim, &x);
        let beta1 = lambda_max(xm.transpose() * &xm) / (4.0 * samples as f64);
        Ok(SyntheticObjective::Logistic { x, y, samples, dim, beta1 })
    }

    pub fn dim(&self) -> usize {
        match self {
            SyntheticObjective::Quadratic { dim, .. } | SyntheticObjective::Logistic { dim, .. } => *dim,
        }
    }

    pub fn beta1(&self) -> f64 {
        match self {
            SyntheticObjective::Quadratic { beta1, .. } | SyntheticObjective::Logistic { beta1, .. } => *beta1,
        }
    }

    /// Known infimum of the objective, when available.
    pub fn lower_bound(&self) -> Option<f64> {
        match self {
            SyntheticObjective::Quadratic { lower_bound, .. } => *lower_bound,
            SyntheticObjective::Logistic { .. } => Some(0.0),
        }
    }

    /// Number of samples minibatches draw from; `None` for deterministic objectives.
    pub fn samples(&self) -> Option<usize> {
        match self {
            SyntheticObjective::Quadratic { .. } => None,
            SyntheticObjective::Logistic { samples, .. } => Some(*samples),
        }
    }

    /// Full-objective value; gradient written to `out` when given.
    pub fn eval(&self, w: &[f64], out: Option<&mut [f64]>) -> f64 {
        match self {
            SyntheticObjective::Quadratic { a, b, dim, .. } => {
                let mut aw = vec![0.0; *dim];
                for (i, v) in aw.iter_mut().enumerate() {
                    *v = a[i * dim..(i + 1) * dim].iter().zip(w).map(|(x, y)| x * y).sum();
                }
                let value = 0.5 * dot(w, &aw) - dot(b, w);
                if let Some(out) = out {
                    for ((o, av), bv) in out.iter_mut().zip(&aw).zip(b) {
                        *o = av - bv;
                    }
                }
                value
            }
            SyntheticObjective::Logistic { samples, .. } => {
                let all: Vec<usize> = (0..*samples).collect();
                self.sample_eval(w, &all, out)
            }
        }
    }

    /// Mean loss over the listed samples (the full objective for quadratics).
    pub fn sample_eval(&self, w: &[f64], idx: &[usize], out: Option<&mut [f64]>) -> f64 {
        match self {
            SyntheticObjective::Quadratic { .. } => self.eval(w, out),
            SyntheticObjective::Logistic { x, y, dim, .. } => {
                let inv = 1.0 / idx.len() as f64;
                let mut total = 0.0;
                let mut grad = out;
                if let Some(g) = grad.as_deref_mut() {
                    g.fill(0.0);
                }
                for &i in idx {
                    let xi = &x[i * dim..(i + 1) * dim];
                    let margin = y[i] * dot(xi, w);
                    // log(1 + exp(-m)), stable for both signs.
                    total += (-margin).max(0.0) + (-margin.abs()).exp().ln_1p();
                    if let Some(g) = grad.as_deref_mut() {
                        let coef = -y[i] * crate::model::sigmoid(-margin) * inv;
                        for (gj, xj) in g.iter_mut().zip(xi) {
                            *gj += coef * xj;
                        }
                    }
                }
                total * inv
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_norm(v: &[f64]) -> f64 {
    dot(v, v)
}

/// `L + lambda * psi`, where `psi` treats each range of coordinates as a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalObjective {
    pub base: SyntheticObjective,
    pub lambda: f64,
    pub layers: Vec<Range<usize>>,
    pub r: f64,
    pub epsilon: f64,
}

impl TotalObjective {
    pub fn new(base: SyntheticObjective, lambda: f64, layers: Vec<Range<usize>>) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda {lambda} must be finite and nonnegative")));
        }
        if lambda > 0.0 && layers.is_empty() {
            return Err(Error::Config("positive lambda needs at least one penalty layer".into()));
        }
        if layers.iter().any(|l| l.is_empty() || l.end > base.dim()) {
            return Err(Error::Dimension("penalty layer outside the parameter vector".into()));
        }
        Ok(TotalObjective { base, lambda, layers, r: 1e-8, epsilon: 1e-8 })
    }

    /// The objective without a penalty.
    pub fn plain(base: SyntheticObjective) -> Self {
        TotalObjective { base, lambda: 0.0, layers: Vec::new(), r: 1e-8, epsilon: 1e-8 }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    fn add_penalty(&self, w: &[f64], out: Option<&mut [f64]>) -> f64 {
        if self.lambda == 0.0 || self.layers.is_empty() {
            return 0.0;
        }
        let psi = match out {
            Some(g) => reg::add_psi_grad_flat(w, &self.layers, self.r, self.epsilon, self.lambda, g),
            None => reg::psi_flat(w, &self.layers, self.r, self.epsilon),
        }
        .expect("layers validated at construction");
        self.lambda * psi
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        self.base.eval(w, None) + self.add_penalty(w, None)
    }

    /// Full composite gradient into `out`; returns the value.
    pub fn gradient(&self, w: &[f64], out: &mut [f64]) -> f64 {
        let base = self.base.eval(w, Some(out));
        base + self.add_penalty(w, Some(out))
    }

    /// Minibatch loss gradient plus the (deterministic) penalty gradient.
    pub fn stochastic_gradient(&self, w: &[f64], idx: &[usize], out: &mut [f64]) -> f64 {
        let base = self.base.sample_eval(w, idx, Some(out));
        base + self.add_penalty(w, Some(out))
    }

    /// Unscaled `grad psi` over the penalty layers (zero without layers).
    pub fn psi_gradient(&self, w: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if !self.layers.is_empty() {
            reg::add_psi_grad_flat(w, &self.layers, self.r, self.epsilon, 1.0, out)
                .expect("layers validated at construction");
        }
    }
}

/// Constants entering the minibatch descent bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub beta2: f64,
    pub beta: f64,
    pub sigma2: f64,
    /// Kept in the bound for completeness; the penalty gradient is
    /// deterministic given `w`, so checks default it to zero.
    pub sigma_psi2: f64,
    pub b: usize,
}

impl BoundParams {
    pub fn new(beta1: f64, beta2: f64, lambda: f64, sigma2: f64, b: usize) -> Self {
        BoundParams { beta2, beta: beta1 + lambda * beta2, sigma2, sigma_psi2: 0.0, b }
    }

    /// `(eta^2 beta / 2b)(sigma^2 + lambda^2 sigma_psi^2)`.
    pub fn noise_term(&self, eta: f64, lambda: f64) -> f64 {
        eta * eta * self.beta / (2.0 * self.b as f64) * (self.sigma2 + lambda * lambda * self.sigma_psi2)
    }
}

/// Running maximum of `|g(u) - g(v)| / |u - v|` over sample pairs.
#[derive(Debug, Clone, Default)]
pub struct BetaEstimator {
    max_ratio: f64,
    pairs: usize,
}

impl BetaEstimator {
    pub fn add_pair(&mut self, gu: &[f64], gv: &[f64], u: &[f64], v: &[f64]) {
        let du: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if du == 0.0 {
            return;
        }
        let dg: f64 = gu.iter().zip(gv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        self.max_ratio = self.max_ratio.max(dg / du);
        self.pairs += 1;
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    /// Max ratio times [`BETA_SAFETY`].
    pub fn estimate(&self) -> Result<f64> {
        if self.pairs == 0 {
            return Err(Error::Precondition("no distinct sample pairs".into()));
        }
        Ok(BETA_SAFETY * self.max_ratio)
    }
}

/// Empirical smoothness constant of `grad`: every pair of `samples`, plus
/// `probes` random neighbours at distance `radius` around each sample.
pub fn estimate_beta(
    mut grad: impl FnMut(&[f64], &mut [f64]),
    samples: &[Vec<f64>],
    probes: usize,
    radius: f64,
    rng: &mut SeededRng,
) -> Result<f64> {
    if samples.len() < 2 && probes == 0 {
        return Err(Error::Precondition("estimate_beta needs at least two samples".into()));
    }
    let dim = samples.first().map_or(0, |s| s.len());
    let grads: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let mut g = vec![0.0; dim];
            grad(s, &mut g);
            g
        })
        .collect();
    let mut est = BetaEstimator::default();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            est.add_pair(&grads[i], &grads[j], &samples[i], &samples[j]);
        }
        for _ in 0..probes {
            let dir = rng.draw_normal_f64(dim, 0.0, 1.0)?;
            let n = sq_norm(&dir).sqrt();
            if n == 0.0 {
                continue;
            }
            let v: Vec<f64> = samples[i].iter().zip(&dir).map(|(a, d)| a + radius * d / n).collect();
            let mut gv = vec![0.0; dim];
            grad(&v, &mut gv);
            est.add_pair(&grads[i], &gv, &samples[i], &v);
        }
    }
    est.estimate()
}

/// One failed step of the full-batch descent inequality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub step: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescentReport {
    pub steps: usize,
    pub violations: Vec<Violation>,
    /// `rhs - lhs` per step; negative beyond the slack means a violation.
    pub margins: Vec<f64>,
}

/// Full-batch gradient descent checking
/// `F(w+) <= F(w) - (eta/2)|grad F(w)|^2` every step, with slack
/// `1e-9 (1 + |F(w)|)`.
pub fn descent_check(obj: &TotalObjective, w0: &[f64], eta: f64, beta: f64, steps: usize) -> Result<DescentReport> {
    if !(eta >= 0.0) || eta * beta > 1.0 + 1e-12 {
        return Err(Error::Precondition(format!("step {eta} exceeds 1/beta = {}", 1.0 / beta)));
    }
    let mut w = w0.to_vec();
    let mut g = vec![0.0; w.len()];
    let mut report = DescentReport { steps, ..DescentReport::default() };
    let mut value = obj.gradient(&w, &mut g);
    for step in 0..steps {
        let gn2 = sq_norm(&g);
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= eta * gi;
        }
        let next = obj.gradient(&w, &mut g);
        let rhs = value - 0.5 * eta * gn2;
        let margin = rhs - next;
        if margin < -1e-9 * (1.0 + value.abs()) {
            report.violations.push(Violation { step, lhs: next, rhs });
        }
        report.margins.push(margin);
        value = next;
        if !value.is_finite() {
            return Err(Error::Numeric { step: Some(step), message: "objective diverged".into() });
        }
    }
    Ok(report)
}

/// Result of one horizon in [`rate_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub horizon: usize,
    pub eta: f64,
    /// Mean over finished seeds of `(1/T) sum_t |grad F(w_t)|^2`.
    pub mean_avg_sq_grad: f64,
    pub per_seed: Vec<f64>,
    pub diverged: usize,
}

/// Minibatch indices drawn uniformly with replacement.
fn draw_batch(n: usize, b: usize, rng: &mut SeededRng, out: &mut Vec<usize>) {
    out.clear();
    out.extend((0..b).map(|_| rng.index(n)));
}

/// Trajectory average of the squared full composite gradient along an SGD
/// run of `horizon` steps at constant step `eta`.
pub fn sgd_trajectory_average(
    obj: &TotalObjective,
    w0: &[f64],
    eta: f64,
    horizon: usize,
    batch: usize,
    rng: &mut SeededRng,
) -> Option<f64> {
    let mut w = w0.to_vec();
    let mut full = vec![0.0; w.len()];
    let mut step = vec![0.0; w.len()];
    let mut idx = Vec::with_capacity(batch);
    let mut acc = 0.0;
    for _ in 0..horizon {
        obj.gradient(&w, &mut full);
        acc += sq_norm(&full);
        match obj.base.samples() {
            Some(n) => {
                draw_batch(n, batch, rng, &mut idx);
                obj.stochastic_gradient(&w, &idx, &mut step);
            }
            None => step.copy_from_slice(&full),
        }
        for (wi, si) in w.iter_mut().zip(&step) {
            *wi -= eta * si;
        }
        if !acc.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return None;
        }
    }
    Some(acc / horizon as f64)
}

/// For each horizon `T`, fresh runs with `eta = c / sqrt(T)` per seed.
pub fn rate_check(
    obj: &TotalObjective,
    w0: &[f64],
    c: f64,
    beta: f64,
    horizons: &[usize],
    seeds: &[u64],
    batch: usize,
) -> Result<Vec<RateRow>> {
    if !(c > 0.0) || c * beta > 1.0 + 1e-12 {
        return Err(Error::Precondition(format!("c = {c} must lie in (0, 1/beta = {}]", 1.0 / beta)));
    }
    if horizons.windows(2).any(|w| w[0] >= w[1]) || horizons.first() == Some(&0) {
        return Err(Error::Precondition("horizons must be positive and ascending".into()));
    }
    if seeds.is_empty() || batch == 0 {
        return Err(Error::Precondition("rate_check needs seeds and a positive batch size".into()));
    }
    let mut rows = Vec::with_capacity(horizons.len());
    for &t in horizons {
        let eta = c / (t as f64).sqrt();
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut diverged = 0;
        for &seed in seeds {
            let mut rng = SeededRng::new(seed).fork(t as u64);
            match sgd_trajectory_average(obj, w0, eta, t, batch, &mut rng) {
                Some(v) => per_seed.push(v),
                None => diverged += 1,
            }
        }
        let mean = if per_seed.is_empty() { f64::NAN } else { per_seed.iter().sum::<f64>() / per_seed.len() as f64 };
        rows.push(RateRow { horizon: t, eta, mean_avg_sq_grad: mean, per_seed, diverged });
    }
    Ok(rows)
}

/// Least-squares slope of `ln(mean)` against `ln(T)`.
pub fn log_log_slope(rows: &[RateRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.horizon as f64).ln(), r.mean_avg_sq_grad.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Full-batch descent with `eta_t = eta0 / (t + 1)`, reporting
/// `sum eta_t |grad F(w_t)|^2 / sum eta_t` after each checkpoint count of steps.
pub fn diminishing_check(
    obj: &TotalObjective,
    w0: &[f64],
    eta0: f64,
    beta: f64,
    checkpoints: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if !(eta0 > 0.0) || eta0 * beta > 1.0 + 1e-12 {
        return Err(Error::Precondition(format!("eta0 = {eta0} must lie in (0, 1/beta]")));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) || checkpoints.first() == Some(&0) {
        return Err(Error::Precondition("checkpoints must be positive and ascending".into()));
    }
    let last = checkpoints.last().copied().unwrap_or(0);
    let mut w = w0.to_vec();
    let mut g = vec![0.0; w.len()];
    let (mut num, mut den) = (0.0, 0.0);
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.iter().peekable();
    for t in 0..last {
        let eta = eta0 / (t as f64 + 1.0);
        obj.gradient(&w, &mut g);
        num += eta * sq_norm(&g);
        den += eta;
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= eta * gi;
        }
        if next.peek() == Some(&&(t + 1)) {
            out.push((t + 1, num / den));
            next.next();
        }
    }
    Ok(out)
}

/// Estimate of `sigma^2` in `E|g_b - grad L|^2 <= sigma^2 / b`: the mean
/// squared deviation of single-sample gradients from the full gradient.
pub fn estimate_sigma2(obj: &SyntheticObjective, w: &[f64]) -> f64 {
    let Some(n) = obj.samples() else {
        return 0.0;
    };
    let mut full = vec![0.0; w.len()];
    obj.eval(w, Some(&mut full));
    let mut g = vec![0.0; w.len()];
    let mut acc = 0.0;
    for i in 0..n {
        obj.sample_eval(w, &[i], Some(&mut g));
        acc += g.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    acc / n as f64
}

/// One SGD step from `w0` on a seeded minibatch; returns the change in the
/// total objective.
pub fn single_step_change(obj: &TotalObjective, w0: &[f64], eta: f64, batch: usize, rng: &mut SeededRng) -> f64 {
    let n = obj.base.samples().unwrap_or(1);
    let mut idx = Vec::new();
    draw_batch(n, batch, rng, &mut idx);
    let mut g = vec![0.0; w0.len()];
    obj.stochastic_gradient(w0, &idx, &mut g);
    let w1: Vec<f64> = w0.iter().zip(&g).map(|(w, gi)| w - eta * gi).collect();
    obj.value(&w1) - obj.value(w0)
}
