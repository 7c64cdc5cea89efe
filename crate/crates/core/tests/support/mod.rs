//! Independent reference implementations and random instance generators
//! shared by integration and acceptance tests.
#![allow(dead_code)]

use varprune_core::metrics::BinaryMask;
use varprune_core::model::{Activation, Batch, LayerSpec, Network, ParamSet, Targets};
use varprune_core::prune::Mask;
use varprune_core::{SeededRng, Tensor};

/// Elementwise `|a - b| / max(|a|, |b|, floor)`, maximized over coordinates.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d == 0.0 {
                0.0
            } else {
                d / x.abs().max(y.abs()).max(floor)
            }
        })
        .fold(0.0, f64::max)
}

pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, w: &[f64], h: f64) -> Vec<f64> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences with a per-coordinate step `h(w_i)`.
pub fn central_diff_scaled(mut f: impl FnMut(&[f64]) -> f64, w: &[f64], h: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|i| {
            let orig = x[i];
            let step = h(orig);
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / ((orig + step) - (orig - step))
        })
        .collect()
}

/// Penalty recomputed from scratch: per layer `1 / (Var(sqrt(w^2 + r)) + eps)`
/// with a two-pass population variance.
pub fn psi_reference(layers: &[Vec<f64>], r: f64, eps: f64) -> f64 {
    layers
        .iter()
        .map(|w| {
            let s: Vec<f64> = w.iter().map(|x| (x * x + r).sqrt()).collect();
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            1.0 / (var + eps)
        })
        .sum()
}

/// 1-4 prunable entries of 1-256 standard-normal values each.
pub fn random_param_set(rng: &mut SeededRng) -> ParamSet {
    let mut p = ParamSet::new();
    for e in 0..1 + rng.index(4) {
        let n = 1 + rng.index(256);
        let shape = if n.is_multiple_of(2) && rng.index(2) == 0 { vec![2, n / 2] } else { vec![n] };
        let data = rng.draw_normal(n, 0.0, 1.0).unwrap();
        p.push(format!("layer{e}"), Tensor::new(shape, data).unwrap(), true).unwrap();
    }
    p
}

/// Random MLP with at most `max_params` parameters and a matching batch.
pub fn random_net_and_batch(rng: &mut SeededRng, max_params: usize) -> (Network, Batch) {
    let activations = [Activation::Tanh, Activation::Sigmoid, Activation::Identity, Activation::Relu];
    loop {
        let depth = 1 + rng.index(3);
        let dims: Vec<usize> = (0..=depth).map(|_| 1 + rng.index(12)).collect();
        let mut layers = Vec::new();
        for k in 0..depth {
            layers.push(LayerSpec::Dense { in_dim: dims[k], out_dim: dims[k + 1] });
            if k + 1 < depth {
                layers.push(LayerSpec::Activation(activations[rng.index(4)]));
            }
        }
        let net = Network::new(layers).unwrap();
        if net.num_params() > max_params {
            continue;
        }
        let rows = 1 + rng.index(8);
        let inputs = Tensor::new(vec![rows, dims[0]], rng.draw_normal(rows * dims[0], 0.0, 1.0).unwrap()).unwrap();
        let out = dims[depth];
        let targets = if out >= 2 && rng.index(2) == 0 {
            Targets::Classes { labels: (0..rows).map(|_| rng.index(out)).collect(), num_classes: out }
        } else {
            Targets::Masks { values: (0..rows * out).map(|_| rng.index(2) as f32).collect(), outputs: out }
        };
        return (net, Batch::new(inputs, targets).unwrap());
    }
}

/// Smallest |pre-activation| feeding a ReLU over the batch, from an
/// independent forward pass; infinite without ReLU layers.
pub fn min_relu_margin(net: &Network, params: &ParamSet, batch: &Batch) -> f64 {
    let rows = batch.len();
    let mut a: Vec<f64> = batch.inputs.data().iter().map(|&x| x as f64).collect();
    let mut width = batch.features();
    let mut entries = params.entries().iter();
    let mut margin = f64::INFINITY;
    for layer in net.layers() {
        match layer {
            LayerSpec::Dense { out_dim, .. } => {
                let w = entries.next().unwrap().value.data();
                let b = entries.next().unwrap().value.data();
                let mut z = vec![0.0; rows * out_dim];
                for r in 0..rows {
                    for o in 0..*out_dim {
                        z[r * out_dim + o] =
                            b[o] as f64 + (0..width).map(|i| a[r * width + i] * w[i * out_dim + o] as f64).sum::<f64>();
                    }
                }
                a = z;
                width = *out_dim;
            }
            LayerSpec::Activation(act) => {
                if *act == Activation::Relu {
                    margin = a.iter().fold(margin, |m, z| m.min(z.abs()));
                }
                a = a
                    .iter()
                    .map(|&z| match act {
                        Activation::Relu => z.max(0.0),
                        Activation::Tanh => z.tanh(),
                        Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                        Activation::Identity => z,
                    })
                    .collect();
            }
        }
    }
    margin
}

/// Flat keep bytes of every entry, in entry order.
pub fn flat_keep(mask: &Mask) -> Vec<u8> {
    mask.entries.iter().flat_map(|e| e.keep.iter().copied()).collect()
}

/// Global magnitude mask by sorting every prunable weight on
/// (|w| bits, entry index, flat index). Non-prunable entries keep all weights.
pub fn global_oracle(params: &ParamSet, p: f64) -> Vec<Vec<u8>> {
    let mut keys = Vec::new();
    for (e, entry) in params.entries().iter().enumerate() {
        if entry.prunable {
            for (i, v) in entry.value.data().iter().enumerate() {
                keys.push((v.abs().to_bits(), e, i));
            }
        }
    }
    keys.sort_unstable();
    let k = (p * keys.len() as f64).floor() as usize;
    let mut keep: Vec<Vec<u8>> = params.entries().iter().map(|e| vec![1; e.value.len()]).collect();
    for &(_, e, i) in &keys[..k] {
        keep[e][i] = 0;
    }
    keep
}

/// Same as [`global_oracle`] restricted to the listed entries with `k` drops.
pub fn group_oracle(params: &ParamSet, entries: &[usize], k: usize, keep: &mut [Vec<u8>]) {
    let mut keys = Vec::new();
    for &e in entries {
        for (i, v) in params.entries()[e].value.data().iter().enumerate() {
            keys.push((v.abs().to_bits(), e, i));
        }
    }
    keys.sort_unstable();
    for &(_, e, i) in &keys[..k] {
        keep[e][i] = 0;
    }
}

pub fn random_mask(rng: &mut SeededRng, w: usize, h: usize, density: f64) -> BinaryMask {
    BinaryMask::new(w, h, (0..w * h).map(|_| rng.uniform(0.0, 1.0) < density).collect()).unwrap()
}

/// (tp, fp, fn, tn) by direct counting.
pub fn counts(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (p, g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => c.3 += 1,
        }
    }
    c
}

/// Symmetric Hausdorff distance by all-pairs search; `sqrt(w^2 + h^2)` when
/// exactly one set is empty.
pub fn hausdorff_brute(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let pa = a.foreground();
    let pb = b.foreground();
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((a.width().pow(2) + a.height().pow(2)) as f64).sqrt(),
        _ => {}
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&(x, y)| {
                to.iter()
                    .map(|&(u, v)| {
                        let dx = x as f64 - u as f64;
                        let dy = y as f64 - v as f64;
                        (dx * dx + dy * dy).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}
