//! SGD (optionally SAM-style) on `L + lambda * psi` with momentum and the
//! learning-rate schedules in [`crate::schedule`].

use crate::diagnostics::model_variance;
use crate::error::{Error, Result};
use crate::math::SeededRng;
use crate::metrics::{accuracy, f1_binary, BinaryMask};
use crate::model::{argmax_rows, Batch, LossKind, Network, ParamSet, Targets};
use crate::reg::{self, RegConfig};
use crate::schedule::{LrTracker, Schedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    /// Sharpness-aware update with perturbation radius `rho`.
    Sam {
        rho: f64,
    },
}

impl Optimizer {
    pub fn label(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Sam { .. } => "sam",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub eta0: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub reg: RegConfig,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            eta0: 0.1,
            momentum: 0.9,
            batch_size: 32,
            epochs: 200,
            optimizer: Optimizer::Sgd,
            schedule: Schedule::Constant,
            reg: RegConfig::default(),
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// A zero `eta0` is accepted so a run can leave its initialization untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 >= 0.0) || !self.eta0.is_finite() {
            return Err(Error::Config(format!("eta0 must be finite and nonnegative, got {}", self.eta0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if let Optimizer::Sam { rho } = self.optimizer {
            if !(rho >= 0.0) || !rho.is_finite() {
                return Err(Error::Config(format!("rho must be finite and nonnegative, got {rho}")));
            }
        }
        self.schedule.validate()?;
        self.reg.validate()
    }
}

/// Velocity buffers for momentum, in flat parameter order.
#[derive(Debug, Clone, Default)]
pub struct StepState {
    velocity: Vec<f64>,
    pub sam_fallbacks: usize,
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric(format!("non-finite {what}")));
    }
    Ok(())
}

/// `grad L + lambda grad psi` at the current parameters, using the loss
/// gradient already stored in the grad buffers.
fn composite_direction(params: &ParamSet, reg: &RegConfig) -> Result<Vec<f64>> {
    let mut d = params.grads_to_flat();
    check_finite(&d, "loss gradient")?;
    if reg.lambda != 0.0 {
        let w = params.to_flat();
        let layers = reg.included_ranges(params)?;
        reg::add_psi_grad_flat(&w, &layers, reg.r, reg.epsilon, reg.lambda, &mut d)?;
        check_finite(&d, "regularizer gradient")?;
    }
    Ok(d)
}

fn descend(params: &mut ParamSet, direction: Vec<f64>, eta: f64, momentum: f64, state: &mut StepState) -> Result<()> {
    let mut w = params.to_flat();
    if momentum == 0.0 {
        for (wi, di) in w.iter_mut().zip(&direction) {
            *wi -= eta * di;
        }
    } else {
        if state.velocity.len() != w.len() {
            state.velocity = vec![0.0; w.len()];
        }
        for ((wi, vi), di) in w.iter_mut().zip(state.velocity.iter_mut()).zip(&direction) {
            *vi = momentum * *vi + di;
            *wi -= eta * *vi;
        }
    }
    params.set_from_flat(&w)
}

/// One step of `w <- w - eta (grad L + lambda grad psi)`, with heavy-ball
/// momentum on the combined direction when `momentum > 0`. The loss gradient
/// must already be in the grad buffers; `grad psi` is evaluated at the current
/// parameters.
pub fn sgd_var_step(
    params: &mut ParamSet,
    reg: &RegConfig,
    eta: f64,
    momentum: f64,
    state: &mut StepState,
) -> Result<()> {
    let d = composite_direction(params, reg)?;
    descend(params, d, eta, momentum, state)
}

/// Sharpness-aware step. `loss_fn` fills the grad buffers with the minibatch
/// loss gradient at whatever parameters it is handed and returns the loss.
///
/// The ascent direction `rho * g / |g|` uses the loss gradient alone; the
/// descent direction `grad L + lambda grad psi` is evaluated at the perturbed
/// point and applied from the original parameters. A zero loss gradient (or
/// `rho = 0`) falls back to [`sgd_var_step`]. Returns the loss at the
/// unperturbed parameters.
pub fn sam_var_step(
    params: &mut ParamSet,
    mut loss_fn: impl FnMut(&mut ParamSet) -> Result<f64>,
    reg: &RegConfig,
    eta: f64,
    momentum: f64,
    rho: f64,
    state: &mut StepState,
) -> Result<f64> {
    let loss = loss_fn(params)?;
    let g = params.grads_to_flat();
    check_finite(&g, "loss gradient")?;
    let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if rho == 0.0 || gnorm == 0.0 {
        if gnorm == 0.0 {
            state.sam_fallbacks += 1;
        }
        sgd_var_step(params, reg, eta, momentum, state)?;
        return Ok(loss);
    }
    let original = params.clone();
    let w = params.to_flat();
    let perturbed: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi + rho * gi / gnorm).collect();
    params.set_from_flat(&perturbed)?;
    loss_fn(params)?;
    let d = composite_direction(params, reg)?;
    let grads = params.grads_to_flat();
    *params = original;
    params.set_grads_from_flat(&grads)?;
    descend(params, d, eta, momentum, state)?;
    Ok(loss)
}

/// One row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub psi: f64,
    pub lr: f64,
    pub var_w: f64,
    pub eval_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    pub sam_fallbacks: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub record: RunRecord,
}

/// A run that stopped early; the record holds every completed epoch.
#[derive(Debug, Clone)]
pub struct TrainFailure {
    pub error: Error,
    pub params: ParamSet,
    pub record: RunRecord,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training stopped after {} epochs: {}", self.record.rows.len(), self.error)
    }
}

impl std::error::Error for TrainFailure {}

/// Parameters a run with `seed` starts from.
pub fn initial_params(net: &Network, seed: u64) -> Result<ParamSet> {
    net.init_params(&mut SeededRng::new(seed).fork(0))
}

/// Accuracy for class targets, mean F1 over samples for mask targets (outputs
/// binarized at sigmoid 0.5, i.e. logit 0). Masks are treated as 1-row grids.
pub fn evaluate(net: &Network, params: &ParamSet, data: &Batch) -> Result<f64> {
    let out = net.forward(params, &data.inputs)?;
    match &data.targets {
        Targets::Classes { labels, .. } => accuracy(&argmax_rows(&out), labels),
        Targets::Masks { values, outputs } => {
            let mut total = 0.0;
            for (scores, truth) in out.data().chunks(*outputs).zip(values.chunks(*outputs)) {
                let pred = BinaryMask::from_scores(*outputs, 1, scores, 0.0)?;
                let gt = BinaryMask::from_scores(*outputs, 1, truth, 0.5)?;
                total += f1_binary(&pred, &gt)?;
            }
            Ok(total / data.len() as f64)
        }
    }
}

/// Trains from the seeded initialization. Minibatches come from a fresh
/// seeded shuffle every epoch; the last short batch is kept. `eval` (or the
/// training data when absent) is scored at the end of every epoch.
pub fn train(
    net: &Network,
    data: &Batch,
    eval: Option<&Batch>,
    cfg: &OptimConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let params = match cfg.validate().and_then(|_| initial_params(net, cfg.seed)) {
        Ok(p) => p,
        Err(error) => return Err(TrainFailure { error, params: ParamSet::new(), record: RunRecord::default() }),
    };
    train_from(net, params, data, eval, cfg)
}

/// As [`train`], from the given parameters.
pub fn train_from(
    net: &Network,
    mut params: ParamSet,
    data: &Batch,
    eval: Option<&Batch>,
    cfg: &OptimConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let mut record = RunRecord::default();
    let result = run_epochs(net, &mut params, data, eval, cfg, &mut record);
    match result {
        Ok(()) => Ok(TrainOutcome { params, record }),
        Err(error) => Err(TrainFailure { error, params, record }),
    }
}

fn run_epochs(
    net: &Network,
    params: &mut ParamSet,
    data: &Batch,
    eval: Option<&Batch>,
    cfg: &OptimConfig,
    record: &mut RunRecord,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("training data is empty".into()));
    }
    let kind: LossKind = data.loss_kind();
    let psi_cfg = cfg.reg.clone();
    psi_cfg.included_ranges(params)?;
    let mut shuffler = SeededRng::new(cfg.seed).fork(1);
    let mut tracker = LrTracker::new(cfg.schedule, cfg.eta0, cfg.epochs)?;
    let mut state = StepState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let n = data.len();

    for epoch in 0..cfg.epochs {
        let lr = tracker.lr_for_epoch(epoch, &history)?;
        let mut order: Vec<usize> = (0..n).collect();
        shuffler.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk)?;
            let loss = match cfg.optimizer {
                Optimizer::Sgd => {
                    let loss = net.loss_and_grad(params, &batch, kind).map_err(|e| e.at_step(step))?;
                    sgd_var_step(params, &cfg.reg, lr, cfg.momentum, &mut state).map_err(|e| e.at_step(step))?;
                    loss
                }
                Optimizer::Sam { rho } => sam_var_step(
                    params,
                    |p| net.loss_and_grad(p, &batch, kind),
                    &cfg.reg,
                    lr,
                    cfg.momentum,
                    rho,
                    &mut state,
                )
                .map_err(|e| e.at_step(step))?,
            };
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        let train_loss = loss_sum / n as f64;
        history.push(train_loss);
        record.sam_fallbacks = state.sam_fallbacks;
        record.rows.push(EpochRow {
            epoch,
            train_loss,
            psi: reg::psi(params, &psi_cfg)?,
            lr,
            var_w: model_variance(params)?,
            eval_metric: evaluate(net, params, eval.unwrap_or(data))?,
        });
    }
    Ok(())
}
