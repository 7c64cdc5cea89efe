//! Training cells, one-shot pruning sweeps and their files.
//!
//! A cell is one (lambda, seed) pair. Its outputs live under
//! `<output_dir>/lambda-<lambda>/seed-<seed>/`:
//! `checkpoint.varw`, `train_log.csv`, `histogram.csv` and one
//! `mask-<rate>.varm` per prune rate. The sweep table goes to
//! `<output_dir>/sweep.csv`. A failed cell leaves a `FAILED` file holding the
//! error next to whatever it wrote before failing.

use std::path::{Path, PathBuf};

use varprune_core::diagnostics::{model_variance, uniform_edges, weight_histogram, Histogram, Overflow};
use varprune_core::model::{Batch, Network, ParamSet, Targets};
use varprune_core::prune::{apply_mask, build_mask, PruneScope, PruneSpec};
use varprune_core::train::{evaluate, initial_params, train, Optimizer, RunRecord};
use varprune_core::SeededRng;

use crate::config::{sorted_unique_f64, DataKind, ExperimentConfig};
use crate::data::{gen_blobs, gen_shapes, gen_two_moons};
use crate::error::{HarnessError, Result};
use crate::io::{
    load_checkpoint, save_checkpoint, save_mask, write_csv, write_histogram, write_train_log, SWEEP_HEADER,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Batch,
    pub eval: Batch,
}

fn generate(kind: &DataKind, n: usize, rng: &mut SeededRng) -> Result<Batch> {
    Ok(match *kind {
        DataKind::TwoMoons { noise, .. } => gen_two_moons(n, noise, rng)?,
        DataKind::Blobs { k, spread, .. } => gen_blobs(n, k, spread, rng)?,
        DataKind::Shapes { grid_w, grid_h, .. } => gen_shapes(grid_w, grid_h, n, rng)?.batch,
    })
}

/// Training set from stream 0 of `data.seed`, evaluation set from stream 1.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let root = SeededRng::new(cfg.data.seed);
    let n = match cfg.data.kind {
        DataKind::TwoMoons { n, .. } | DataKind::Blobs { n, .. } => n,
        DataKind::Shapes { n_samples, .. } => n_samples,
    };
    Ok(Datasets {
        train: generate(&cfg.data.kind, n, &mut root.fork(0))?,
        eval: generate(&cfg.data.kind, cfg.data.test_n, &mut root.fork(1))?,
    })
}

pub fn metric_name(batch: &Batch) -> &'static str {
    match batch.targets {
        Targets::Classes { .. } => "accuracy",
        Targets::Masks { .. } => "f1",
    }
}

pub fn method_label(optimizer: &Optimizer, lambda: f64) -> String {
    if lambda > 0.0 {
        format!("{}+var", optimizer.label())
    } else {
        optimizer.label().to_string()
    }
}

pub fn cell_dir(output_dir: &Path, lambda: f64, seed: u64) -> PathBuf {
    output_dir.join(format!("lambda-{lambda}")).join(format!("seed-{seed}"))
}

pub fn mask_path(dir: &Path, rate: f64) -> PathBuf {
    dir.join(format!("mask-{rate}.varm"))
}

/// Copies prunable flags from the network's own layout (checkpoints do not
/// store them).
pub fn align_prunable(net: &Network, params: &mut ParamSet) -> Result<()> {
    let reference = initial_params(net, 0)?;
    if reference.len() != params.len() {
        return Err(HarnessError::Core(varprune_core::Error::Dimension(format!(
            "checkpoint has {} entries, network expects {}",
            params.len(),
            reference.len()
        ))));
    }
    for (r, p) in reference.entries().iter().zip(params.entries_mut()) {
        if r.name != p.name || r.value.shape() != p.value.shape() {
            return Err(HarnessError::Core(varprune_core::Error::Dimension(format!(
                "checkpoint entry `{}` {:?} does not match network entry `{}` {:?}",
                p.name,
                p.value.shape(),
                r.name,
                r.value.shape()
            ))));
        }
        p.prunable = r.prunable;
    }
    Ok(())
}

/// Histogram of prunable weights over `bins` equal bins spanning
/// `[-max|w|, max|w|]`.
pub fn symmetric_histogram(params: &ParamSet, bins: usize) -> Result<Histogram> {
    let max = params.prunable_values().fold(0.0f64, |m, v| m.max((v as f64).abs()));
    let half = if max > 0.0 { max } else { 1.0 };
    let edges = uniform_edges(-half, half, bins)?;
    Ok(weight_histogram(params, &edges, Overflow::Clamp)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedCell {
    pub lambda: f64,
    pub seed: u64,
    pub dir: PathBuf,
    pub params: ParamSet,
    pub record: RunRecord,
    pub dense_metric: f64,
    pub var_w: f64,
}

fn flag_failure(dir: &Path, e: &HarnessError) {
    // Best effort: the original error is what gets reported.
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(dir.join("FAILED"), format!("{e}\n"));
}

/// Trains one cell and writes its checkpoint, training log and histogram.
pub fn train_cell(
    cfg: &ExperimentConfig,
    net: &Network,
    data: &Datasets,
    lambda: f64,
    seed: u64,
) -> Result<TrainedCell> {
    let dir = cell_dir(&cfg.output_dir, lambda, seed);
    let result = (|| {
        let optim = cfg.cell_config(lambda, seed);
        let outcome = match train(net, &data.train, Some(&data.eval), &optim) {
            Ok(o) => o,
            Err(failure) => {
                write_train_log(&dir.join("train_log.csv"), &failure.record.rows)?;
                return Err(HarnessError::Core(failure.error));
            }
        };
        save_checkpoint(&outcome.params, &dir.join("checkpoint.varw"))?;
        write_train_log(&dir.join("train_log.csv"), &outcome.record.rows)?;
        write_histogram(&dir.join("histogram.csv"), &symmetric_histogram(&outcome.params, cfg.hist_bins)?)?;
        let dense_metric = evaluate(net, &outcome.params, &data.eval)?;
        let var_w = model_variance(&outcome.params)?;
        Ok(TrainedCell {
            lambda,
            seed,
            dir: dir.clone(),
            params: outcome.params,
            record: outcome.record,
            dense_metric,
            var_w,
        })
    })();
    if let Err(e) = &result {
        flag_failure(&dir, e);
    }
    result
}

/// One row of the sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub lambda: f64,
    pub seed: u64,
    pub prune_rate: f64,
    pub metric_name: String,
    pub metric_value: f64,
    /// Variance of the dense (unpruned) prunable weights.
    pub var_w: f64,
    pub dense_metric: f64,
}

impl ResultRow {
    pub fn fields(&self) -> [String; 8] {
        [
            self.method.clone(),
            self.lambda.to_string(),
            self.seed.to_string(),
            self.prune_rate.to_string(),
            self.metric_name.clone(),
            self.metric_value.to_string(),
            self.var_w.to_string(),
            self.dense_metric.to_string(),
        ]
    }
}

/// Labels a sweep's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepMeta {
    pub method: String,
    pub lambda: f64,
    pub seed: u64,
}

/// Evaluates the trained weights in `checkpoint` after one-shot pruning at
/// each rate. Rows come back sorted by rate; masks are written to `mask_dir`
/// when given.
pub fn prune_sweep(
    checkpoint: &Path,
    rates: &[f64],
    scope: &PruneScope,
    net: &Network,
    eval: &Batch,
    meta: &SweepMeta,
    mask_dir: Option<&Path>,
) -> Result<Vec<ResultRow>> {
    let mut params = load_checkpoint(checkpoint)?;
    align_prunable(net, &mut params)?;
    let dense_metric = evaluate(net, &params, eval)?;
    let var_w = model_variance(&params)?;
    let mut rows = Vec::with_capacity(rates.len());
    for rate in sorted_unique_f64(rates) {
        let mask = build_mask(&params, &PruneSpec { rate, scope: scope.clone() })?;
        if let Some(dir) = mask_dir {
            save_mask(&mask, &mask_path(dir, rate))?;
        }
        let pruned = apply_mask(&params, &mask)?;
        rows.push(ResultRow {
            method: meta.method.clone(),
            lambda: meta.lambda,
            seed: meta.seed,
            prune_rate: rate,
            metric_name: metric_name(eval).to_string(),
            metric_value: evaluate(net, &pruned, eval)?,
            var_w,
            dense_metric,
        });
    }
    Ok(rows)
}

/// Every (lambda, seed) pair in `(lambda, seed)` order.
pub fn cells(cfg: &ExperimentConfig) -> Vec<(f64, u64)> {
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    sorted_unique_f64(&cfg.lambdas).into_iter().flat_map(|l| seeds.iter().map(move |&s| (l, s))).collect()
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.lambda.total_cmp(&b.lambda).then(a.seed.cmp(&b.seed)).then(a.prune_rate.total_cmp(&b.prune_rate))
    });
}

pub fn write_sweep(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let fields: Vec<[String; 8]> = rows.iter().map(ResultRow::fields).collect();
    write_csv(path, SWEEP_HEADER, &fields)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub cells: Vec<TrainedCell>,
    /// Sorted by (lambda, seed, rate); empty without prune rates.
    pub rows: Vec<ResultRow>,
}

/// Trains every cell.
pub fn train_all(cfg: &ExperimentConfig) -> Result<Vec<TrainedCell>> {
    let net = cfg.network()?;
    let data = build_datasets(cfg)?;
    cells(cfg).into_iter().map(|(l, s)| train_cell(cfg, &net, &data, l, s)).collect()
}

/// Sweeps prune rates over the checkpoints already present for every cell.
pub fn sweep_saved(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let net = cfg.network()?;
    let data = build_datasets(cfg)?;
    let mut rows = Vec::new();
    for (lambda, seed) in cells(cfg) {
        let dir = cell_dir(&cfg.output_dir, lambda, seed);
        let meta = SweepMeta { method: method_label(&cfg.train.optimizer, lambda), lambda, seed };
        rows.extend(prune_sweep(
            &dir.join("checkpoint.varw"),
            &cfg.prune_rates,
            &cfg.prune_scope,
            &net,
            &data.eval,
            &meta,
            Some(&dir),
        )?);
    }
    sort_rows(&mut rows);
    write_sweep(&cfg.output_dir.join("sweep.csv"), &rows)?;
    Ok(rows)
}

/// Trains every cell, then prunes each saved checkpoint at every rate
/// without retraining.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let net = cfg.network()?;
    let data = build_datasets(cfg)?;
    let mut trained = Vec::new();
    let mut rows = Vec::new();
    for (lambda, seed) in cells(cfg) {
        let cell = train_cell(cfg, &net, &data, lambda, seed)?;
        if !cfg.prune_rates.is_empty() {
            let meta = SweepMeta { method: method_label(&cfg.train.optimizer, lambda), lambda, seed };
            let swept = prune_sweep(
                &cell.dir.join("checkpoint.varw"),
                &cfg.prune_rates,
                &cfg.prune_scope,
                &net,
                &data.eval,
                &meta,
                Some(&cell.dir),
            );
            match swept {
                Ok(r) => rows.extend(r),
                Err(e) => {
                    flag_failure(&cell.dir, &e);
                    return Err(e);
                }
            }
        }
        trained.push(cell);
    }
    sort_rows(&mut rows);
    if !cfg.prune_rates.is_empty() {
        write_sweep(&cfg.output_dir.join("sweep.csv"), &rows)?;
    }
    Ok(ExperimentOutcome { cells: trained, rows })
}
