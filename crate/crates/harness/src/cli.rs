//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use varprune_core::diagnostics::{model_variance, top_hessian_eigenvalue, NetLoss, SharpnessProbe};
use varprune_core::model::{Batch, Targets};
use varprune_core::SeededRng;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::experiment::{
    align_prunable, build_datasets, cell_dir, cells, run_experiment, sweep_saved, symmetric_histogram, train_all,
};
use crate::io::{load_checkpoint, write_csv, write_histogram};
use crate::lab::run_lab;

#[derive(Debug, Parser)]
#[command(name = "varprune", version, about = "Variance-regularized training and one-shot pruning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Experiment config (flat `key = value` text); defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every (lambda, seed) cell and write checkpoints and logs.
    Train(Common),
    /// Prune saved checkpoints at every configured rate.
    Prune(Common),
    /// Train, then prune each checkpoint (the full experiment).
    Sweep(Common),
    /// Weight variance, histogram and top Hessian eigenvalue of saved checkpoints.
    Diagnose(Common),
    /// Convergence benchmarks on synthetic objectives.
    Converge(Common),
    /// Write the training and evaluation sets as CSV.
    GenData(Common),
}

pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
        cfg.lab.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            for cell in train_all(&load_config(&c)?)? {
                println!(
                    "lambda={} seed={} metric={} var_w={} -> {}",
                    cell.lambda,
                    cell.seed,
                    cell.dense_metric,
                    cell.var_w,
                    cell.dir.display()
                );
            }
        }
        Command::Prune(c) => {
            let cfg = load_config(&c)?;
            let rows = sweep_saved(&cfg)?;
            println!("{} rows -> {}", rows.len(), cfg.output_dir.join("sweep.csv").display());
        }
        Command::Sweep(c) => {
            let cfg = load_config(&c)?;
            let out = run_experiment(&cfg)?;
            println!("{} cells, {} sweep rows -> {}", out.cells.len(), out.rows.len(), cfg.output_dir.display());
        }
        Command::Diagnose(c) => {
            let cfg = load_config(&c)?;
            diagnose(&cfg)?;
            println!("-> {}", cfg.output_dir.join("diagnose.csv").display());
        }
        Command::Converge(c) => {
            let cfg = load_config(&c)?;
            run_lab(&cfg.lab, &cfg.output_dir)?;
            println!("-> {}", cfg.output_dir.display());
        }
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let data = build_datasets(&cfg)?;
            write_batch(&cfg.output_dir.join("train.csv"), &data.train)?;
            write_batch(&cfg.output_dir.join("eval.csv"), &data.eval)?;
            println!("-> {}", cfg.output_dir.display());
        }
    }
    Ok(())
}

/// For every saved cell: weight variance, histogram (`diagnose_histogram.csv`
/// in the cell directory) and the top Hessian eigenvalue of the training loss.
pub fn diagnose(cfg: &ExperimentConfig) -> Result<()> {
    let net = cfg.network()?;
    let data = build_datasets(cfg)?;
    let mut rows = Vec::new();
    for (lambda, seed) in cells(cfg) {
        let dir = cell_dir(&cfg.output_dir, lambda, seed);
        let mut params = load_checkpoint(&dir.join("checkpoint.varw"))?;
        align_prunable(&net, &mut params)?;
        write_histogram(&dir.join("diagnose_histogram.csv"), &symmetric_histogram(&params, cfg.hist_bins)?)?;
        let mut field = NetLoss::new(&net, &data.train);
        let eig = top_hessian_eigenvalue(
            &mut field,
            &params.to_flat(),
            &SharpnessProbe::default(),
            &mut SeededRng::new(seed).fork(2),
        )?;
        rows.push([
            lambda.to_string(),
            seed.to_string(),
            model_variance(&params)?.to_string(),
            eig.value.to_string(),
            eig.iterations.to_string(),
            eig.converged.to_string(),
        ]);
    }
    write_csv(
        &cfg.output_dir.join("diagnose.csv"),
        ["lambda", "seed", "var_w", "top_eigenvalue", "iterations", "converged"],
        &rows,
    )
}

/// Features as `x0..`, then `label` (classes) or `y0..` (masks).
pub fn write_batch(path: &Path, batch: &Batch) -> Result<()> {
    let f = batch.features();
    let mut header: Vec<String> = (0..f).map(|i| format!("x{i}")).collect();
    let targets: Vec<Vec<String>> = match &batch.targets {
        Targets::Classes { labels, .. } => {
            header.push("label".into());
            labels.iter().map(|l| vec![l.to_string()]).collect()
        }
        Targets::Masks { values, outputs } => {
            header.extend((0..*outputs).map(|i| format!("y{i}")));
            values.chunks(*outputs).map(|c| c.iter().map(|v| v.to_string()).collect()).collect()
        }
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::HarnessError::io(dir, e))?;
    }
    let csv_err = |source| crate::HarnessError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for (row, t) in batch.inputs.data().chunks(f).zip(targets) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.extend(t);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| crate::HarnessError::io(path, e))
}
