//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Each criterion also has a wall-clock budget.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use support::*;
use varprune::config::ExperimentConfig;
use varprune::data::gen_two_moons;
use varprune::experiment::{run_experiment, ExperimentOutcome};
use varprune::lab::{descent_suite, diminishing_suite, rate_suite, LabConfig};
use varprune_core::diagnostics::{top_hessian_eigenvalue, GradientField, NetLoss, SharpnessProbe};
use varprune_core::metrics::{accuracy, f1_binary, hausdorff, tversky, BinaryMask};
use varprune_core::model::Network;
use varprune_core::prune::{magnitude_mask_global, magnitude_mask_grouped, resolve_group_rates, GroupSpec};
use varprune_core::reg::{psi_grad, RegConfig};
use varprune_core::train::{train, OptimConfig, Optimizer};
use varprune_core::{ParamSet, SeededRng, Tensor};

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/two_moons.toml");
const RATE: f64 = 0.9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn two_moons_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_file(Path::new(CONFIG)).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

/// Per-lambda means over seeds of (final var_w, dense metric, pruned metric).
struct LambdaSummary {
    lambda: f64,
    var_w: f64,
    dense: f64,
    pruned: f64,
}

fn summarize(out: &ExperimentOutcome) -> Vec<LambdaSummary> {
    let mut lambdas: Vec<f64> = out.cells.iter().map(|c| c.lambda).collect();
    lambdas.dedup();
    lambdas
        .into_iter()
        .map(|lambda| {
            let cells: Vec<_> = out.cells.iter().filter(|c| c.lambda == lambda).collect();
            let pruned: Vec<f64> = out
                .rows
                .iter()
                .filter(|r| r.lambda == lambda && r.prune_rate == RATE)
                .map(|r| r.metric_value)
                .collect();
            assert_eq!(pruned.len(), cells.len());
            LambdaSummary {
                lambda,
                var_w: mean(&cells.iter().map(|c| c.var_w).collect::<Vec<_>>()),
                dense: mean(&cells.iter().map(|c| c.dense_metric).collect::<Vec<_>>()),
                pruned: mean(&pruned),
            }
        })
        .collect()
}

/// The lambda sweep, trained once and shared by the criteria that read it.
fn sweep() -> &'static (Vec<LambdaSummary>, Duration) {
    static SWEEP: OnceLock<(Vec<LambdaSummary>, Duration)> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let out = run_experiment(&two_moons_config(dir.path())).unwrap();
        (summarize(&out), start.elapsed())
    })
}

/// Nonzero lambda with the highest mean pruned accuracy.
fn best_lambda() -> &'static LambdaSummary {
    sweep().0.iter().filter(|s| s.lambda > 0.0).max_by(|a, b| a.pruned.total_cmp(&b.pruned)).unwrap()
}

fn c1_regularizer_gradient() -> Outcome {
    let cfg = RegConfig::default();
    let mut rng = SeededRng::new(100);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = random_param_set(&mut rng);
        let g = psi_grad(&p, &cfg).unwrap();
        let lens: Vec<usize> = p.entries().iter().map(|e| e.value.len()).collect();
        let f = |w: &[f64]| {
            let mut layers = Vec::new();
            let mut at = 0;
            for &n in &lens {
                layers.push(w[at..at + n].to_vec());
                at += n;
            }
            psi_reference(&layers, cfg.r, cfg.epsilon)
        };
        let fd = central_diff_scaled(f, &p.to_flat(), |x| 3e-4 * (x * x + cfg.r).sqrt());
        worst = worst.max(max_rel_err(&g, &fd, 0.0));
    }
    outcome(worst < 1e-5, format!("max relative error {worst:.2e} over 50 sets (limit 1e-5)"))
}

fn c2_backprop() -> Outcome {
    let mut rng = SeededRng::new(200);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (net, batch, params) = loop {
            let (net, batch) = random_net_and_batch(&mut rng, 500);
            let params = net.init_params(&mut rng).unwrap();
            if min_relu_margin(&net, &params, &batch) > 1e-2 {
                break (net, batch, params);
            }
        };
        let w = params.to_flat();
        let mut g = vec![0.0; w.len()];
        net.loss_flat(&w, &batch, batch.loss_kind(), Some(&mut g)).unwrap();
        let fd = central_diff(|x| net.loss_flat(x, &batch, batch.loss_kind(), None).unwrap(), &w, 1e-3);
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        worst = worst.max(max_rel_err(&g, &fd, 1e-2 * scale));
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over 20 nets (limit 1e-4)"))
}

fn tied_params(rng: &mut SeededRng) -> ParamSet {
    let ties = rng.index(2) == 0;
    let levels = [0.0f32, 0.25, -0.25, 0.5, -0.5, 1.0, -1.0];
    let entries = 2 + rng.index(4);
    let mut p = ParamSet::new();
    for e in 0..entries {
        let n = 1 + rng.index(10_000 / entries);
        let data: Vec<f32> = if ties {
            (0..n).map(|_| levels[rng.index(levels.len())]).collect()
        } else {
            rng.draw_normal(n, 0.0, 1.0).unwrap()
        };
        p.push(format!("w{e}"), Tensor::new(vec![n], data).unwrap(), true).unwrap();
    }
    p
}

fn c3_pruning_oracle() -> Outcome {
    let mut rng = SeededRng::new(300);
    let (mut mismatches, mut miscounts, mut instances) = (0, 0, 0);
    while instances < 100 {
        let p = tied_params(&mut rng);
        let n = p.num_values();
        let rate = rng.uniform(0.0, 0.99);

        let global = magnitude_mask_global(&p, rate).unwrap();
        let want = global_oracle(&p, rate);
        mismatches += (flat_keep(&global) != want.concat()) as usize;
        miscounts += (global.pruned_count() != (rate * n as f64).floor() as usize) as usize;

        let names: Vec<String> = p.entries().iter().map(|e| e.name.clone()).collect();
        let split = 1 + rng.index(names.len() - 1);
        let a: Vec<&str> = names[..split].iter().map(String::as_str).collect();
        let b: Vec<&str> = names[split..].iter().map(String::as_str).collect();
        let groups = [GroupSpec::new("a", &a).skewed(0.03 * rng.index(2) as f64), GroupSpec::new("b", &b)];
        let Ok(resolved) = resolve_group_rates(&p, &groups, rate) else { continue };
        let grouped = magnitude_mask_grouped(&p, &resolved).unwrap();
        let mut keep: Vec<Vec<u8>> = p.entries().iter().map(|e| vec![1; e.value.len()]).collect();
        for g in &resolved {
            group_oracle(&p, &g.entries, g.count, &mut keep);
        }
        mismatches += (flat_keep(&grouped) != keep.concat()) as usize;
        miscounts += (grouped.pruned_count() != (rate * n as f64).floor() as usize) as usize;
        instances += 1;
    }
    outcome(
        mismatches == 0 && miscounts == 0,
        format!("{instances} instances: {mismatches} mask mismatches, {miscounts} count mismatches"),
    )
}

fn c4_variance_monotone() -> Outcome {
    let (summary, elapsed) = sweep();
    let vars: Vec<String> = summary.iter().map(|s| format!("{}:{:.4}", s.lambda, s.var_w)).collect();
    let increasing = summary.windows(2).all(|w| w[1].var_w > w[0].var_w);
    outcome(increasing, format!("mean var_w by lambda [{}], sweep {:.1} s", vars.join(", "), elapsed.as_secs_f64()))
}

fn c5_pruning_robustness() -> Outcome {
    let base = &sweep().0[0];
    let best = best_lambda();
    let gain = best.pruned - base.pruned;
    let dense_gap = (best.dense - base.dense).abs();
    outcome(
        gain > 0.0 && dense_gap < 0.02,
        format!(
            "90% pruned accuracy {:.4} (lambda 0) vs {:.4} (lambda {}), gain {gain:+.4}; dense gap {dense_gap:.4} (limit 0.02)",
            base.pruned, best.pruned, best.lambda
        ),
    )
}

fn c6_full_batch_descent() -> Outcome {
    let rows = descent_suite(&LabConfig::default()).unwrap();
    let violations: usize = rows.iter().map(|r| r.violations).sum();
    let steps: usize = rows.iter().map(|r| r.steps).sum();
    let worst = rows.iter().map(|r| r.min_margin).fold(f64::INFINITY, f64::min);
    outcome(
        violations == 0 && rows.len() == 100 && steps == 100_000,
        format!("{violations} violations in {steps} steps over {} runs, min margin {worst:.2e}", rows.len()),
    )
}

fn c7_rate() -> Outcome {
    let curves = rate_suite(&LabConfig::default()).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for c in &curves {
        let at = |t: usize| c.rows.iter().find(|r| r.horizon == t).unwrap().mean_avg_sq_grad;
        let ratio = at(1600) / at(400);
        let diverged: usize = c.rows.iter().map(|r| r.diverged).sum();
        pass &= ratio <= 0.6 && (-0.7..=-0.3).contains(&c.slope) && diverged == 0;
        parts.push(format!("lambda {}: ratio {ratio:.3}, slope {:.3}", c.lambda, c.slope));
    }
    outcome(pass, parts.join("; "))
}

fn c8_diminishing() -> Outcome {
    let traces = diminishing_suite(&LabConfig::default()).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (lambda, trace) in &traces {
        pass &= trace.len() == 3 && trace.windows(2).all(|w| w[1].1 < w[0].1);
        let vals: Vec<String> = trace.iter().map(|(t, v)| format!("{t}:{v:.4}")).collect();
        parts.push(format!("lambda {lambda}: {}", vals.join(" > ")));
    }
    outcome(pass, parts.join("; "))
}

struct DiagQuadratic(Vec<f64>);

impl GradientField for DiagQuadratic {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn gradient(&mut self, w: &[f64], out: &mut [f64]) -> varprune_core::Result<f64> {
        let mut f = 0.0;
        for ((o, d), x) in out.iter_mut().zip(&self.0).zip(w) {
            *o = d * x;
            f += 0.5 * d * x * x;
        }
        Ok(f)
    }
}

fn c9_sharpness() -> Outcome {
    let mut rng = SeededRng::new(900);
    let probe = SharpnessProbe { max_iters: 200, ..SharpnessProbe::default() };
    let mut worst = 0.0f64;
    let mut most_iters = 0;
    for _ in 0..20 {
        let n = 2 + rng.index(50);
        // Relative spectral gap of at least 0.1.
        let top = rng.uniform(1.0, 10.0);
        let mut d: Vec<f64> = (0..n).map(|_| rng.uniform(0.01, 0.9) * top).collect();
        d[rng.index(n)] = top;
        let w = rng.draw_normal_f64(n, 0.0, 1.0).unwrap();
        let est = top_hessian_eigenvalue(&mut DiagQuadratic(d), &w, &probe, &mut rng).unwrap();
        worst = worst.max((est.value - top).abs() / top);
        most_iters = most_iters.max(est.iterations);
    }

    let data = gen_two_moons(300, 0.1, &mut SeededRng::new(901)).unwrap();
    let net = Network::mlp(&[2, 16, 16, 2], varprune_core::Activation::Relu).unwrap();
    let cfg = OptimConfig { eta0: 0.05, epochs: 50, ..OptimConfig::default() };
    let params = train(&net, &data, None, &cfg).unwrap().params;
    let w = params.to_flat();
    let mlp_probe = SharpnessProbe { max_iters: 1000, tol: 1e-9, ..SharpnessProbe::default() };
    let a = top_hessian_eigenvalue(&mut NetLoss::new(&net, &data), &w, &mlp_probe, &mut SeededRng::new(1)).unwrap();
    let b = top_hessian_eigenvalue(&mut NetLoss::new(&net, &data), &w, &mlp_probe, &mut SeededRng::new(2)).unwrap();
    let spread = (a.value - b.value).abs() / a.value.abs().max(b.value.abs());
    outcome(
        worst <= 1e-3 && most_iters <= 200 && spread <= 0.01,
        format!(
            "diag quadratics: max relative error {worst:.2e} in <= {most_iters} iterations; MLP starts {:.5} vs {:.5} ({:.3}%)",
            a.value,
            b.value,
            100.0 * spread
        ),
    )
}

fn c10_metrics() -> Outcome {
    let mut rng = SeededRng::new(1000);
    let (mut count_err, mut ratio_err, mut dist_err, mut f1_tversky) = (0usize, 0.0f64, 0.0f64, true);
    for _ in 0..50 {
        let (d1, d2) = (rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5));
        let pred = random_mask(&mut rng, 16, 16, d1);
        let gt = random_mask(&mut rng, 16, 16, d2);
        let (tp, fp, fn_, tn) = counts(&pred, &gt);
        let c = varprune_core::metrics::confusion(&pred, &gt).unwrap();
        count_err += ((c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fn_, tn)) as usize;

        let pixels = |m: &BinaryMask| m.values().iter().map(|&v| v as usize).collect::<Vec<_>>();
        let acc = accuracy(&pixels(&pred), &pixels(&gt)).unwrap();
        ratio_err = ratio_err.max((acc - (tp + tn) as f64 / 256.0).abs());
        let f1_ref = if tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        let f1 = f1_binary(&pred, &gt).unwrap();
        ratio_err = ratio_err.max((f1 - f1_ref).abs());
        let (alpha, beta) = (0.3, 0.7);
        let tv_ref =
            if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp as f64 + alpha * fp as f64 + beta * fn_ as f64) };
        ratio_err = ratio_err.max((tversky(&pred, &gt, alpha, beta).unwrap() - tv_ref).abs());
        f1_tversky &= tversky(&pred, &gt, 0.5, 0.5).unwrap() == f1;
        dist_err = dist_err.max((hausdorff(&pred, &gt).unwrap() - hausdorff_brute(&pred, &gt)).abs());
    }
    outcome(
        count_err == 0 && ratio_err <= 1e-12 && dist_err <= 1e-9 && f1_tversky,
        format!(
            "50 pairs: {count_err} count mismatches, ratio error {ratio_err:.1e}, distance error {dist_err:.1e}, tversky(0.5, 0.5) == f1: {f1_tversky}"
        ),
    )
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c11_determinism() -> Outcome {
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("runs");
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let status = Command::new(env!("CARGO_BIN_EXE_varprune"))
            .args(["sweep", "--config", CONFIG, "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, format!("sweep failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        snapshots.push(files_under(&out));
        fs::remove_dir_all(&out).unwrap();
    }
    let files = snapshots[0].len();
    let checkpoints = snapshots[0].iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "varw")).count();
    let csvs = snapshots[0].iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "csv")).count();
    outcome(
        snapshots[0] == snapshots[1] && checkpoints == 20,
        format!(
            "{files} files ({checkpoints} checkpoints, {csvs} CSVs) byte-identical: {}",
            snapshots[0] == snapshots[1]
        ),
    )
}

fn c12_sam_composition() -> Outcome {
    let best = best_lambda().lambda;
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = two_moons_config(dir.path());
    cfg.train.optimizer = Optimizer::Sam { rho: 0.05 };
    cfg.lambdas = vec![0.0, best];
    let summary = summarize(&run_experiment(&cfg).unwrap());
    let gap = summary[1].pruned - summary[0].pruned;
    outcome(
        gap >= 0.0,
        format!(
            "SAM 90% pruned accuracy {:.4} (lambda 0) vs {:.4} (lambda {best}), gap {gap:+.4}",
            summary[0].pruned, summary[1].pruned
        ),
    )
}

type Criterion = (&'static str, &'static str, u64, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("C1", "regularizer gradient exactness", 5, c1_regularizer_gradient),
        ("C2", "backprop exactness", 30, c2_backprop),
        ("C3", "pruning mask oracle equivalence", 10, c3_pruning_oracle),
        ("C4", "weight variance increases with lambda", 180, c4_variance_monotone),
        ("C5", "pruning robustness with the penalty", 300, c5_pruning_robustness),
        ("C6", "full-batch descent inequality", 30, c6_full_batch_descent),
        ("C7", "inverse square root rate", 120, c7_rate),
        ("C8", "diminishing-step stationarity", 60, c8_diminishing),
        ("C9", "sharpness probe", 30, c9_sharpness),
        ("C10", "metric oracles", 5, c10_metrics),
        ("C11", "determinism", 120, c11_determinism),
        ("C12", "SAM with the penalty", 300, c12_sam_composition),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run)
            .unwrap_or_else(|e| outcome(false, format!("panicked: {:?}", e.downcast_ref::<String>())));
        let mut elapsed = start.elapsed();
        if id == "C5" {
            // C5 reuses the C4 sweep; charge it the training time too.
            elapsed += sweep().1;
        }
        let in_time = elapsed <= Duration::from_secs(budget);
        let pass = result.pass && in_time;
        failed += !pass as usize;
        println!(
            "{id} {} {name}: {} [{:.1} s, budget {budget} s]",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
