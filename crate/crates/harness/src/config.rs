//! Experiment configuration: flat `key = value` text with dotted keys.
//!
//! ```text
//! model.layers = [2, 32, 32, 2]
//! data.kind = "two_moons"
//! data.n = 1000
//! reg.lambda = [0.0, 1e-4]
//! prune.rates = [0.0, 0.5, 0.9]
//! seeds = [0, 1, 2]
//! ```
//!
//! Tables (`[train]`) and dotted keys are interchangeable. Unknown keys are
//! rejected, and every validation failure names the offending key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use toml::Value;
use varprune_core::model::{Activation, Network};
use varprune_core::prune::{resolve_group_rates, GroupSpec, PruneScope};
use varprune_core::reg::{Include, RegConfig};
use varprune_core::schedule::{DynamicTuning, Schedule};
use varprune_core::train::{initial_params, OptimConfig, Optimizer};

use crate::error::{HarnessError, Result};
use crate::lab::LabConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DataKind {
    TwoMoons { n: usize, noise: f64 },
    Blobs { n: usize, k: usize, spread: f64 },
    Shapes { grid_w: usize, grid_h: usize, n_samples: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub kind: DataKind,
    /// Size of the held-out evaluation set; defaults to the training size.
    pub test_n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub data: DataSpec,
    /// Training settings; `seed` and `reg.lambda` are set per cell.
    pub train: OptimConfig,
    pub lambdas: Vec<f64>,
    pub prune_rates: Vec<f64>,
    pub prune_scope: PruneScope,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub hist_bins: usize,
    pub lab: LabConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            layers: vec![2, 32, 32, 2],
            activation: Activation::Relu,
            data: DataSpec { kind: DataKind::TwoMoons { n: 1000, noise: 0.1 }, test_n: 1000, seed: 0 },
            train: OptimConfig::default(),
            lambdas: vec![0.0],
            prune_rates: Vec::new(),
            prune_scope: PruneScope::Global,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            hist_bins: 50,
            lab: LabConfig::default(),
        }
    }
}

fn err(key: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("`{key}`: {msg}"))
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(err(key, "expected a number")),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(err(key, "expected a nonnegative integer")),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    as_usize(key, v).map(|x| x as u64)
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| err(key, "expected a string"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| err(key, "expected true or false"))
}

fn as_list<T>(key: &str, v: &Value, item: impl Fn(&str, &Value) -> Result<T>) -> Result<Vec<T>> {
    match v {
        Value::Array(a) => a.iter().map(|x| item(key, x)).collect(),
        single => Ok(vec![item(key, single)?]),
    }
}

#[derive(Default)]
struct Raw {
    kind: Option<String>,
    n: Option<usize>,
    noise: Option<f64>,
    k: Option<usize>,
    spread: Option<f64>,
    grid_w: Option<usize>,
    grid_h: Option<usize>,
    n_samples: Option<usize>,
    test_n: Option<usize>,
    optimizer: Option<String>,
    rho: Option<f64>,
    schedule: Option<String>,
    decay_factor: Option<f64>,
    decay_period: Option<usize>,
    c: Option<f64>,
    scope: Option<String>,
    groups: BTreeMap<String, GroupSpec>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        let mut cfg = ExperimentConfig::default();
        let mut raw = Raw::default();
        let mut reg = RegConfig::default();
        for (key, v) in &flat {
            let k = key.as_str();
            match k {
                "model.layers" => cfg.layers = as_list(k, v, as_usize)?,
                "model.activation" => {
                    cfg.activation = as_str(k, v)?.parse().map_err(|e: varprune_core::Error| err(k, e))?
                }
                "data.kind" => raw.kind = Some(as_str(k, v)?.to_string()),
                "data.n" => raw.n = Some(as_usize(k, v)?),
                "data.noise" => raw.noise = Some(as_f64(k, v)?),
                "data.k" => raw.k = Some(as_usize(k, v)?),
                "data.spread" => raw.spread = Some(as_f64(k, v)?),
                "data.grid_w" => raw.grid_w = Some(as_usize(k, v)?),
                "data.grid_h" => raw.grid_h = Some(as_usize(k, v)?),
                "data.n_samples" => raw.n_samples = Some(as_usize(k, v)?),
                "data.test_n" => raw.test_n = Some(as_usize(k, v)?),
                "data.seed" => cfg.data.seed = as_u64(k, v)?,
                "train.eta0" => cfg.train.eta0 = as_f64(k, v)?,
                "train.momentum" => cfg.train.momentum = as_f64(k, v)?,
                "train.batch_size" => cfg.train.batch_size = as_usize(k, v)?,
                "train.epochs" => cfg.train.epochs = as_usize(k, v)?,
                "train.optimizer" => raw.optimizer = Some(as_str(k, v)?.to_string()),
                "train.rho" => raw.rho = Some(as_f64(k, v)?),
                "train.schedule" => raw.schedule = Some(as_str(k, v)?.to_string()),
                "train.decay_factor" => raw.decay_factor = Some(as_f64(k, v)?),
                "train.decay_period" => raw.decay_period = Some(as_usize(k, v)?),
                "train.c" => raw.c = Some(as_f64(k, v)?),
                "reg.lambda" => cfg.lambdas = as_list(k, v, as_f64)?,
                "reg.r" => reg.r = as_f64(k, v)?,
                "reg.epsilon" => reg.epsilon = as_f64(k, v)?,
                "reg.include" => {
                    reg.include = match v {
                        Value::Array(_) => Include::Names(as_list(k, v, |k, x| as_str(k, x).map(String::from))?),
                        _ => match as_str(k, v)? {
                            "prunable" => Include::Prunable,
                            "all" => Include::All,
                            other => return Err(err(k, format!("unknown selection `{other}`"))),
                        },
                    }
                }
                "prune.rates" => cfg.prune_rates = as_list(k, v, as_f64)?,
                "prune.scope" => raw.scope = Some(as_str(k, v)?.to_string()),
                "seeds" => cfg.seeds = as_list(k, v, as_u64)?,
                "output_dir" => cfg.output_dir = PathBuf::from(as_str(k, v)?),
                "diagnose.bins" => cfg.hist_bins = as_usize(k, v)?,
                "converge.seed" => cfg.lab.seed = as_u64(k, v)?,
                "converge.dim" => cfg.lab.dim = as_usize(k, v)?,
                "converge.instances" => cfg.lab.instances = as_usize(k, v)?,
                "converge.steps" => cfg.lab.steps = as_usize(k, v)?,
                "converge.eig_lo" => cfg.lab.eig_lo = as_f64(k, v)?,
                "converge.eig_hi" => cfg.lab.eig_hi = as_f64(k, v)?,
                "converge.descent_lambda" => cfg.lab.descent_lambdas = as_list(k, v, as_f64)?,
                "converge.samples" => cfg.lab.samples = as_usize(k, v)?,
                "converge.features" => cfg.lab.features = as_usize(k, v)?,
                "converge.flip" => cfg.lab.flip = as_f64(k, v)?,
                "converge.batch" => cfg.lab.batch = as_usize(k, v)?,
                "converge.horizons" => cfg.lab.horizons = as_list(k, v, as_usize)?,
                "converge.rate_lambda" => cfg.lab.rate_lambdas = as_list(k, v, as_f64)?,
                "converge.rate_seeds" => cfg.lab.rate_seeds = as_usize(k, v)?,
                "converge.checkpoints" => cfg.lab.checkpoints = as_list(k, v, as_usize)?,
                _ => {
                    let group = k
                        .strip_prefix("prune.groups.")
                        .and_then(|rest| rest.rsplit_once('.'))
                        .filter(|(name, _)| !name.contains('.'));
                    let Some((name, field)) = group else {
                        return Err(err(k, "unknown key"));
                    };
                    let g = raw.groups.entry(name.to_string()).or_insert_with(|| GroupSpec::new(name, &[] as &[&str]));
                    match field {
                        "members" => g.members = as_list(k, v, |k, x| as_str(k, x).map(String::from))?,
                        "skew" => g.skew = as_f64(k, v)?,
                        "frozen" => g.frozen = as_bool(k, v)?,
                        _ => return Err(err(k, "unknown key")),
                    }
                }
            }
        }
        cfg.train.reg = reg;
        cfg.resolve(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, raw: Raw) -> Result<()> {
        self.data.kind = match raw.kind.as_deref().unwrap_or("two_moons") {
            "two_moons" => DataKind::TwoMoons { n: raw.n.unwrap_or(1000), noise: raw.noise.unwrap_or(0.1) },
            "blobs" => {
                DataKind::Blobs { n: raw.n.unwrap_or(1000), k: raw.k.unwrap_or(2), spread: raw.spread.unwrap_or(0.5) }
            }
            "shapes" => DataKind::Shapes {
                grid_w: raw.grid_w.unwrap_or(16),
                grid_h: raw.grid_h.unwrap_or(16),
                n_samples: raw.n_samples.unwrap_or(200),
            },
            other => return Err(err("data.kind", format!("unknown dataset `{other}`"))),
        };
        let stray = match self.data.kind {
            DataKind::TwoMoons { .. } => [
                ("data.k", raw.k.is_some()),
                ("data.spread", raw.spread.is_some()),
                ("data.grid_w", raw.grid_w.is_some()),
                ("data.grid_h", raw.grid_h.is_some()),
                ("data.n_samples", raw.n_samples.is_some()),
            ],
            DataKind::Blobs { .. } => [
                ("data.noise", raw.noise.is_some()),
                ("data.grid_w", raw.grid_w.is_some()),
                ("data.grid_h", raw.grid_h.is_some()),
                ("data.n_samples", raw.n_samples.is_some()),
                ("", false),
            ],
            DataKind::Shapes { .. } => [
                ("data.n", raw.n.is_some()),
                ("data.noise", raw.noise.is_some()),
                ("data.k", raw.k.is_some()),
                ("data.spread", raw.spread.is_some()),
                ("", false),
            ],
        };
        if let Some((key, _)) = stray.iter().find(|(_, set)| *set) {
            return Err(err(key, "does not apply to this data.kind"));
        }
        self.data.test_n = raw.test_n.unwrap_or(match self.data.kind {
            DataKind::TwoMoons { n, .. } | DataKind::Blobs { n, .. } => n,
            DataKind::Shapes { n_samples, .. } => n_samples,
        });

        self.train.optimizer = match raw.optimizer.as_deref().unwrap_or("sgd") {
            "sgd" => {
                if raw.rho.is_some() {
                    return Err(err("train.rho", "only applies to train.optimizer = \"sam\""));
                }
                Optimizer::Sgd
            }
            "sam" => Optimizer::Sam { rho: raw.rho.unwrap_or(0.05) },
            other => return Err(err("train.optimizer", format!("unknown optimizer `{other}`"))),
        };
        self.train.schedule = match raw.schedule.as_deref().unwrap_or("constant") {
            "constant" => Schedule::Constant,
            "step_decay" => {
                Schedule::StepDecay { factor: raw.decay_factor.unwrap_or(0.5), period: raw.decay_period.unwrap_or(50) }
            }
            "dynamic" => Schedule::DynamicTuning(DynamicTuning::default()),
            "inv_sqrt" => Schedule::InvSqrt { c: raw.c.ok_or_else(|| err("train.c", "required by inv_sqrt"))? },
            other => return Err(err("train.schedule", format!("unknown schedule `{other}`"))),
        };
        if !matches!(self.train.schedule, Schedule::StepDecay { .. }) {
            if raw.decay_factor.is_some() {
                return Err(err("train.decay_factor", "only applies to step_decay"));
            }
            if raw.decay_period.is_some() {
                return Err(err("train.decay_period", "only applies to step_decay"));
            }
        }
        if raw.c.is_some() && !matches!(self.train.schedule, Schedule::InvSqrt { .. }) {
            return Err(err("train.c", "only applies to inv_sqrt"));
        }
        self.prune_scope = match raw.scope.as_deref().unwrap_or(if raw.groups.is_empty() { "global" } else { "groups" })
        {
            "global" => {
                if !raw.groups.is_empty() {
                    return Err(err("prune.groups", "groups need prune.scope = \"groups\""));
                }
                PruneScope::Global
            }
            "groups" => {
                if raw.groups.is_empty() {
                    return Err(err("prune.groups", "scope \"groups\" needs at least one group"));
                }
                PruneScope::Groups(raw.groups.into_values().collect())
            }
            other => return Err(err("prune.scope", format!("unknown scope `{other}`"))),
        };
        Ok(())
    }

    pub fn network(&self) -> Result<Network> {
        Network::mlp(&self.layers, self.activation).map_err(|e| err("model.layers", e))
    }

    fn io_dims(&self) -> (usize, usize) {
        match self.data.kind {
            DataKind::TwoMoons { .. } => (2, 2),
            DataKind::Blobs { k, .. } => (2, k),
            DataKind::Shapes { grid_w, grid_h, .. } => (grid_w * grid_h, grid_w * grid_h),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(err(key, format!("must be finite and nonnegative, got {v}")))
            }
        };
        match self.data.kind {
            DataKind::TwoMoons { n, noise } => {
                if n < 2 {
                    return Err(err("data.n", "must be at least 2"));
                }
                nonneg("data.noise", noise)?;
            }
            DataKind::Blobs { n, k, spread } => {
                if n < 2 {
                    return Err(err("data.n", "must be at least 2"));
                }
                if k < 2 || k > n {
                    return Err(err("data.k", "must lie in [2, data.n]"));
                }
                nonneg("data.spread", spread)?;
            }
            DataKind::Shapes { grid_w, grid_h, n_samples } => {
                if grid_w < 2 {
                    return Err(err("data.grid_w", "must be at least 2"));
                }
                if grid_h < 2 {
                    return Err(err("data.grid_h", "must be at least 2"));
                }
                if n_samples == 0 {
                    return Err(err("data.n_samples", "must be at least 1"));
                }
            }
        }
        let min_test = if matches!(self.data.kind, DataKind::Blobs { .. } | DataKind::TwoMoons { .. }) { 2 } else { 1 };
        if self.data.test_n < min_test {
            return Err(err("data.test_n", format!("must be at least {min_test}")));
        }
        if let DataKind::Blobs { k, .. } = self.data.kind {
            if self.data.test_n < k {
                return Err(err("data.test_n", "must be at least data.k"));
            }
        }
        let net = self.network()?;
        let (inp, out) = self.io_dims();
        if net.input_dim() != inp || net.output_dim() != out {
            return Err(err(
                "model.layers",
                format!("network maps {} -> {} but the data needs {inp} -> {out}", net.input_dim(), net.output_dim()),
            ));
        }
        let t = &self.train;
        nonneg("train.eta0", t.eta0)?;
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(err("train.momentum", format!("must lie in [0, 1), got {}", t.momentum)));
        }
        if t.batch_size == 0 {
            return Err(err("train.batch_size", "must be at least 1"));
        }
        if t.epochs == 0 {
            return Err(err("train.epochs", "must be at least 1"));
        }
        if let Optimizer::Sam { rho } = t.optimizer {
            nonneg("train.rho", rho)?;
        }
        match t.schedule {
            Schedule::StepDecay { factor, period } => {
                if !(factor > 0.0 && factor.is_finite()) {
                    return Err(err("train.decay_factor", "must be positive"));
                }
                if period == 0 {
                    return Err(err("train.decay_period", "must be at least 1"));
                }
            }
            Schedule::InvSqrt { c } if !(c > 0.0 && c.is_finite()) => return Err(err("train.c", "must be positive")),
            _ => {}
        }
        if self.lambdas.is_empty() {
            return Err(err("reg.lambda", "needs at least one value"));
        }
        for &l in &self.lambdas {
            nonneg("reg.lambda", l)?;
        }
        if sorted_unique_f64(&self.lambdas).len() != self.lambdas.len() {
            return Err(err("reg.lambda", "values must be distinct"));
        }
        if !(t.reg.r > 0.0 && t.reg.r.is_finite()) {
            return Err(err("reg.r", "must be positive"));
        }
        if !(t.reg.epsilon > 0.0 && t.reg.epsilon.is_finite()) {
            return Err(err("reg.epsilon", "must be positive"));
        }
        for &p in &self.prune_rates {
            if !(0.0..1.0).contains(&p) {
                return Err(err("prune.rates", format!("{p} is outside [0, 1)")));
            }
        }
        if self.seeds.is_empty() {
            return Err(err("seeds", "needs at least one seed"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(err("seeds", "values must be distinct"));
        }
        if self.hist_bins == 0 {
            return Err(err("diagnose.bins", "must be at least 1"));
        }
        self.validate_lab()?;
        // Shape-only checks that need a parameter layout.
        let params = initial_params(&net, 0)?;
        if self.lambdas.iter().any(|&l| l > 0.0) {
            t.reg.included_ranges(&params).map_err(|e| err("reg.include", e))?;
        }
        if let PruneScope::Groups(groups) = &self.prune_scope {
            for g in groups {
                for m in &g.members {
                    if params.get(m).is_none() {
                        return Err(err(
                            &format!("prune.groups.{}.members", g.name),
                            format!("no parameter named `{m}`"),
                        ));
                    }
                }
            }
            for &p in &self.prune_rates {
                resolve_group_rates(&params, groups, p).map_err(|e| err("prune.groups", e))?;
            }
        }
        Ok(())
    }

    fn validate_lab(&self) -> Result<()> {
        let l = &self.lab;
        for (key, v) in [
            ("converge.dim", l.dim),
            ("converge.instances", l.instances),
            ("converge.steps", l.steps),
            ("converge.features", l.features),
            ("converge.batch", l.batch),
            ("converge.rate_seeds", l.rate_seeds),
        ] {
            if v == 0 {
                return Err(err(key, "must be at least 1"));
            }
        }
        if l.samples < 2 {
            return Err(err("converge.samples", "must be at least 2"));
        }
        if !(l.eig_lo >= 0.0 && l.eig_lo.is_finite()) {
            return Err(err("converge.eig_lo", "must be finite and nonnegative"));
        }
        if !(l.eig_hi > 0.0 && l.eig_hi >= l.eig_lo && l.eig_hi.is_finite()) {
            return Err(err("converge.eig_hi", "must be positive and at least converge.eig_lo"));
        }
        if !(0.0..=0.5).contains(&l.flip) {
            return Err(err("converge.flip", "must lie in [0, 0.5]"));
        }
        for (key, list) in [("converge.descent_lambda", &l.descent_lambdas), ("converge.rate_lambda", &l.rate_lambdas)]
        {
            if list.is_empty() || list.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return Err(err(key, "needs finite nonnegative values"));
            }
        }
        for (key, list) in [("converge.horizons", &l.horizons), ("converge.checkpoints", &l.checkpoints)] {
            if list.is_empty() || list[0] == 0 || list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(err(key, "needs positive, strictly ascending values"));
            }
        }
        Ok(())
    }

    /// Training settings for one (lambda, seed) cell.
    pub fn cell_config(&self, lambda: f64, seed: u64) -> OptimConfig {
        let mut c = self.train.clone();
        c.reg.lambda = lambda;
        c.seed = seed;
        c
    }
}

/// Values sorted ascending with exact duplicates removed.
pub fn sorted_unique_f64(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}
