use varprune_core::diagnostics::model_variance;
use varprune_core::model::{Activation, Batch, LossKind, Network, Targets};
use varprune_core::reg::RegConfig;
use varprune_core::schedule::{DynamicTuning, Schedule};
use varprune_core::train::{initial_params, train, train_from, OptimConfig, Optimizer};
use varprune_core::{Error, ParamSet, SeededRng, Tensor};

fn blobs(seed: u64, n: usize) -> Batch {
    let mut rng = SeededRng::new(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let centre = if c == 0 { -1.0 } else { 1.0 };
        x.push((centre + 0.8 * rng.standard_normal()) as f32);
        x.push((centre * 0.5 + 0.8 * rng.standard_normal()) as f32);
        labels.push(c);
    }
    Batch::new(Tensor::new(vec![n, 2], x).unwrap(), Targets::Classes { labels, num_classes: 2 }).unwrap()
}

fn bits(p: &ParamSet) -> Vec<u32> {
    p.entries().iter().flat_map(|e| e.value.data().iter().map(|v| v.to_bits())).collect()
}

/// Plain minibatch SGD with heavy-ball momentum, written against the public
/// model API only.
fn plain_sgd(net: &Network, data: &Batch, eta: f64, momentum: f64, batch: usize, epochs: usize, seed: u64) -> ParamSet {
    let mut params = initial_params(net, seed).unwrap();
    let mut shuffler = SeededRng::new(seed).fork(1);
    let mut v = vec![0.0f64; params.num_values()];
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffler.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            net.loss_and_grad(&mut params, &data.select(chunk).unwrap(), LossKind::SoftmaxCe).unwrap();
            let g = params.grads_to_flat();
            let mut w = params.to_flat();
            for ((wi, vi), gi) in w.iter_mut().zip(&mut v).zip(&g) {
                *vi = momentum * *vi + gi;
                *wi -= eta * *vi;
            }
            params.set_from_flat(&w).unwrap();
        }
    }
    params
}

#[test]
fn zero_lambda_is_plain_sgd() {
    let data = blobs(1, 100);
    let net = Network::mlp(&[2, 6, 2], Activation::Relu).unwrap();
    let cfg = OptimConfig {
        eta0: 0.05,
        momentum: 0.9,
        batch_size: 16,
        epochs: 5,
        reg: RegConfig::with_lambda(0.0),
        seed: 4,
        ..OptimConfig::default()
    };
    let ours = train(&net, &data, None, &cfg).unwrap().params;
    let reference = plain_sgd(&net, &data, 0.05, 0.9, 16, 5, 4);
    assert_eq!(bits(&ours), bits(&reference));
}

#[test]
fn single_weight_layer_ignores_the_penalty() {
    let mut rng = SeededRng::new(2);
    let x: Vec<f32> = rng.draw_normal(40, 0.0, 1.0).unwrap();
    let y: Vec<f32> = x.iter().map(|&v| if v > 0.3 { 1.0 } else { 0.0 }).collect();
    let data = Batch::new(Tensor::new(vec![40, 1], x).unwrap(), Targets::Masks { values: y, outputs: 1 }).unwrap();
    let net = Network::mlp(&[1, 1], Activation::Identity).unwrap();
    let run = |lambda: f64| {
        let cfg = OptimConfig {
            eta0: 0.1,
            epochs: 20,
            batch_size: 8,
            reg: RegConfig::with_lambda(lambda),
            ..OptimConfig::default()
        };
        train(&net, &data, None, &cfg).unwrap()
    };
    let (a, b) = (run(0.0), run(10.0));
    assert_eq!(bits(&a.params), bits(&b.params));
    let losses = |r: &varprune_core::train::TrainOutcome| {
        r.record.rows.iter().map(|row| row.train_loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(losses(&a), losses(&b));
}

#[test]
fn minibatch_gradient_is_unbiased() {
    let data = blobs(3, 24);
    let net = Network::mlp(&[2, 3, 2], Activation::Tanh).unwrap();
    let params = initial_params(&net, 0).unwrap();
    let w = params.to_flat();
    let mut full = vec![0.0; w.len()];
    net.loss_flat(&w, &data, LossKind::SoftmaxCe, Some(&mut full)).unwrap();

    let draws = 10_000;
    let mut rng = SeededRng::new(5);
    let mut sum = vec![0.0; w.len()];
    let mut sq = vec![0.0; w.len()];
    let mut g = vec![0.0; w.len()];
    for _ in 0..draws {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        net.loss_flat(&w, &data.select(&order[..5]).unwrap(), LossKind::SoftmaxCe, Some(&mut g)).unwrap();
        for i in 0..w.len() {
            sum[i] += g[i];
            sq[i] += g[i] * g[i];
        }
    }
    let n = draws as f64;
    for i in 0..w.len() {
        let mean = sum[i] / n;
        let se = ((sq[i] / n - mean * mean).max(0.0) / n).sqrt();
        assert!((mean - full[i]).abs() <= 3.0 * se + 1e-12, "coord {i}: {mean} vs {} (se {se})", full[i]);
    }
}

#[test]
fn full_batch_loss_strictly_decreases_on_a_convex_problem() {
    let data = blobs(6, 80);
    let net = Network::mlp(&[2, 2], Activation::Identity).unwrap();
    let cfg = OptimConfig { eta0: 0.05, momentum: 0.0, batch_size: 80, epochs: 101, ..OptimConfig::default() };
    let rows = train(&net, &data, None, &cfg).unwrap().record.rows;
    for w in rows.windows(2) {
        assert!(w[1].train_loss < w[0].train_loss, "{} then {}", w[0].train_loss, w[1].train_loss);
    }
}

#[test]
fn training_is_deterministic() {
    let data = blobs(7, 120);
    let net = Network::mlp(&[2, 8, 8, 2], Activation::Relu).unwrap();
    for optimizer in [Optimizer::Sgd, Optimizer::Sam { rho: 0.05 }] {
        let cfg = OptimConfig {
            eta0: 0.05,
            epochs: 10,
            optimizer,
            reg: RegConfig::with_lambda(1e-4),
            seed: 9,
            ..OptimConfig::default()
        };
        let a = train(&net, &data, None, &cfg).unwrap();
        let b = train(&net, &data, None, &cfg).unwrap();
        assert_eq!(bits(&a.params), bits(&b.params));
        assert_eq!(a.record, b.record);
    }
}

#[test]
fn zero_learning_rate_keeps_the_initialization() {
    let data = blobs(8, 30);
    let net = Network::mlp(&[2, 4, 2], Activation::Relu).unwrap();
    let cfg = OptimConfig { eta0: 0.0, epochs: 1, seed: 3, ..OptimConfig::default() };
    let out = train(&net, &data, None, &cfg).unwrap();
    assert_eq!(bits(&out.params), bits(&initial_params(&net, 3).unwrap()));
    assert_eq!(out.record.rows.len(), 1);
}

#[test]
fn record_has_one_row_per_epoch() {
    let data = blobs(9, 50);
    let net = Network::mlp(&[2, 4, 2], Activation::Relu).unwrap();
    let cfg = OptimConfig { eta0: 0.05, epochs: 7, reg: RegConfig::with_lambda(1e-3), ..OptimConfig::default() };
    let out = train(&net, &data, None, &cfg).unwrap();
    assert_eq!(out.record.rows.len(), 7);
    for (i, row) in out.record.rows.iter().enumerate() {
        assert_eq!(row.epoch, i);
        assert!(row.psi > 0.0 && row.train_loss > 0.0);
    }
    assert_eq!(out.record.rows[6].var_w, model_variance(&out.params).unwrap());
}

#[test]
fn divergence_keeps_the_partial_record() {
    let data = blobs(10, 50);
    let net = Network::mlp(&[2, 16, 2], Activation::Identity).unwrap();
    let cfg = OptimConfig { eta0: 1e30, momentum: 0.0, epochs: 50, ..OptimConfig::default() };
    let err = train(&net, &data, None, &cfg).unwrap_err();
    assert!(matches!(err.error, Error::Numeric { .. }), "{}", err.error);
    assert!(err.record.rows.len() < 50);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = blobs(11, 10);
    let net = Network::mlp(&[2, 2], Activation::Identity).unwrap();
    for cfg in [
        OptimConfig { momentum: 1.0, ..OptimConfig::default() },
        OptimConfig { batch_size: 0, ..OptimConfig::default() },
        OptimConfig { epochs: 0, ..OptimConfig::default() },
        OptimConfig { eta0: -1.0, ..OptimConfig::default() },
        OptimConfig { optimizer: Optimizer::Sam { rho: -0.1 }, ..OptimConfig::default() },
        OptimConfig { schedule: Schedule::StepDecay { factor: 0.5, period: 0 }, ..OptimConfig::default() },
    ] {
        assert!(matches!(train(&net, &data, None, &cfg).unwrap_err().error, Error::Config(_)));
    }
}

/// Learning rates from the schedule rules, given the losses of completed epochs.
fn reference_lrs(schedule: &Schedule, eta0: f64, epochs: usize, losses: &[f64]) -> Vec<f64> {
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let mut out = Vec::new();
    let mut lr = eta0;
    for e in 0..epochs {
        lr = match *schedule {
            Schedule::Constant => eta0,
            Schedule::StepDecay { factor, period } => eta0 * factor.powi((e / period) as i32),
            Schedule::InvSqrt { c } => c / (epochs as f64).sqrt(),
            Schedule::DynamicTuning(_) => {
                if e > 0 && (e == epochs / 3 || e == 2 * epochs / 3) {
                    lr /= 10.0;
                }
                if e >= 20 && (e - 20) % 5 == 0 {
                    lr *= if mean(&losses[e - 5..e]) > mean(&losses[e - 10..e]) { 0.7 } else { 1.06 };
                }
                lr
            }
        };
        out.push(lr);
    }
    out
}

#[test]
fn lr_trace_matches_the_schedule_rules() {
    let data = blobs(12, 60);
    let net = Network::mlp(&[2, 4, 2], Activation::Relu).unwrap();
    let schedules = [
        Schedule::Constant,
        Schedule::StepDecay { factor: 0.5, period: 7 },
        Schedule::InvSqrt { c: 0.3 },
        Schedule::DynamicTuning(DynamicTuning::default()),
    ];
    for schedule in schedules {
        let cfg = OptimConfig { eta0: 0.05, epochs: 60, batch_size: 8, schedule, ..OptimConfig::default() };
        let rows = train(&net, &data, None, &cfg).unwrap().record.rows;
        let losses: Vec<f64> = rows.iter().map(|r| r.train_loss).collect();
        let got: Vec<f64> = rows.iter().map(|r| r.lr).collect();
        assert_eq!(got, reference_lrs(&schedule, 0.05, 60, &losses), "{schedule:?}");
    }
}

#[test]
fn resuming_from_given_params_matches_a_fresh_run() {
    let data = blobs(13, 40);
    let net = Network::mlp(&[2, 4, 2], Activation::Relu).unwrap();
    let cfg = OptimConfig { eta0: 0.05, epochs: 3, seed: 2, ..OptimConfig::default() };
    let a = train(&net, &data, None, &cfg).unwrap();
    let b = train_from(&net, initial_params(&net, 2).unwrap(), &data, None, &cfg).unwrap();
    assert_eq!(bits(&a.params), bits(&b.params));
}
