mod support;

use proptest::prelude::*;
use support::*;
use varprune_core::model::{Activation, Batch, LossKind, Network, Targets};
use varprune_core::reg::{psi, psi_grad, RegConfig};
use varprune_core::{SeededRng, Tensor};

fn layer_values(p: &varprune_core::ParamSet) -> Vec<Vec<f64>> {
    p.entries().iter().map(|e| e.value.data().iter().map(|&x| x as f64).collect()).collect()
}

#[test]
fn psi_matches_reference_value() {
    let mut rng = SeededRng::new(7);
    for _ in 0..50 {
        let p = random_param_set(&mut rng);
        let got = psi(&p, &RegConfig::default()).unwrap();
        let want = psi_reference(&layer_values(&p), 1e-8, 1e-8);
        assert!((got - want).abs() <= 1e-10 * want, "{got} vs {want}");
    }
}

#[test]
fn psi_gradient_matches_finite_differences() {
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
            psi_reference(&layers, 1e-8, 1e-8)
        };
        // Steps scale with the smoothing width so weights near zero are resolved.
        let fd = central_diff_scaled(f, &p.to_flat(), |x| 3e-4 * (x * x + 1e-8).sqrt());
        worst = worst.max(max_rel_err(&g, &fd, 0.0));
    }
    assert!(worst < 1e-5, "max relative error {worst:e}");
}

#[test]
fn excluded_entries_get_zero_gradient() {
    let mut rng = SeededRng::new(3);
    let mut p = random_param_set(&mut rng);
    p.push("bias", Tensor::new(vec![4], vec![0.3, -0.1, 2.0, 0.5]).unwrap(), false).unwrap();
    let g = psi_grad(&p, &RegConfig::default()).unwrap();
    assert!(g[g.len() - 4..].iter().all(|&x| x == 0.0));
}

#[test]
fn backprop_matches_finite_differences() {
    let mut rng = SeededRng::new(200);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        // Finite differences are only valid away from ReLU kinks.
        let (net, batch, params) = loop {
            let (net, batch) = random_net_and_batch(&mut rng, 500);
            let params = net.init_params(&mut rng).unwrap();
            if min_relu_margin(&net, &params, &batch) > 1e-2 {
                break (net, batch, params);
            }
        };
        assert!(net.num_params() <= 500);
        let w = params.to_flat();
        let mut g = vec![0.0; w.len()];
        net.loss_flat(&w, &batch, batch.loss_kind(), Some(&mut g)).unwrap();
        let fd = central_diff(|x| net.loss_flat(x, &batch, batch.loss_kind(), None).unwrap(), &w, 1e-3);
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let e = max_rel_err(&g, &fd, 1e-2 * scale);
        worst = worst.max(e);
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn stored_gradients_match_the_flat_path() {
    let mut rng = SeededRng::new(5);
    for _ in 0..10 {
        let (net, batch) = random_net_and_batch(&mut rng, 500);
        let mut params = net.init_params(&mut rng).unwrap();
        let w = params.to_flat();
        let mut g = vec![0.0; w.len()];
        let flat = net.loss_flat(&w, &batch, batch.loss_kind(), Some(&mut g)).unwrap();
        let stored = net.loss_and_grad(&mut params, &batch, batch.loss_kind()).unwrap();
        assert_eq!(flat, stored);
        let expect: Vec<f64> = g.iter().map(|&x| x as f32 as f64).collect();
        assert_eq!(params.grads_to_flat(), expect);
    }
}

#[test]
fn forward_is_pure() {
    let mut rng = SeededRng::new(9);
    let (net, batch) = random_net_and_batch(&mut rng, 500);
    let params = net.init_params(&mut rng).unwrap();
    let a = net.forward(&params, &batch.inputs).unwrap();
    let b = net.forward(&params, &batch.inputs).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_cross_entropy_is_nonnegative(seed in any::<u64>(), rows in 1usize..6, classes in 2usize..6) {
        let mut rng = SeededRng::new(seed);
        let net = Network::mlp(&[3, 4, classes], Activation::Tanh).unwrap();
        let params = net.init_params(&mut rng).unwrap();
        let inputs = Tensor::new(vec![rows, 3], rng.draw_normal(rows * 3, 0.0, 3.0).unwrap()).unwrap();
        let labels = (0..rows).map(|_| rng.index(classes)).collect();
        let batch = Batch::new(inputs, Targets::Classes { labels, num_classes: classes }).unwrap();
        let loss = net.loss_flat(&params.to_flat(), &batch, LossKind::SoftmaxCe, None).unwrap();
        prop_assert!(loss > 0.0);
    }
}
