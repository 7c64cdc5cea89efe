//! Seeded synthetic datasets.

use std::f64::consts::PI;

use varprune_core::metrics::BinaryMask;
use varprune_core::model::{Batch, Targets};
use varprune_core::{Error, Result, SeededRng, Tensor};

/// Labels `0..k` repeated round-robin, then shuffled: every class gets
/// `n / k` or `n / k + 1` samples.
fn balanced_labels(n: usize, k: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    rng.shuffle(&mut labels);
    labels
}

/// Two interleaved half circles. Class 0 lies on the upper arc
/// `(cos t, sin t)`, class 1 on `(1 - cos t, 0.5 - sin t)`, `t` uniform in
/// `[0, pi]`, plus isotropic Gaussian noise.
pub fn gen_two_moons(n: usize, noise: f64, rng: &mut SeededRng) -> Result<Batch> {
    if n < 2 {
        return Err(Error::Precondition(format!("two_moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Precondition(format!("two_moons noise must be >= 0, got {noise}")));
    }
    let labels = balanced_labels(n, 2, rng);
    let mut inputs = Vec::with_capacity(2 * n);
    for &label in &labels {
        let t = rng.uniform(0.0, PI);
        let (x, y) = if label == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        let (nx, ny) = (rng.standard_normal(), rng.standard_normal());
        inputs.push((x + noise * nx) as f32);
        inputs.push((y + noise * ny) as f32);
    }
    Batch::new(Tensor::new(vec![n, 2], inputs)?, Targets::Classes { labels, num_classes: 2 })
}

/// `k` Gaussian blobs with centroids evenly spaced on a circle of radius 3.
pub fn gen_blobs(n: usize, k: usize, spread: f64, rng: &mut SeededRng) -> Result<Batch> {
    if n < 2 || k < 2 || k > n {
        return Err(Error::Precondition(format!("blobs need 2 <= k <= n, got n = {n}, k = {k}")));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Precondition(format!("blobs spread must be >= 0, got {spread}")));
    }
    let labels = balanced_labels(n, k, rng);
    let mut inputs = Vec::with_capacity(2 * n);
    for &label in &labels {
        let (cx, cy) = blob_centroid(label, k);
        let (nx, ny) = (rng.standard_normal(), rng.standard_normal());
        inputs.push((cx + spread * nx) as f32);
        inputs.push((cy + spread * ny) as f32);
    }
    Batch::new(Tensor::new(vec![n, 2], inputs)?, Targets::Classes { labels, num_classes: k })
}

pub fn blob_centroid(label: usize, k: usize) -> (f64, f64) {
    let a = 2.0 * PI * label as f64 / k as f64;
    (3.0 * a.cos(), 3.0 * a.sin())
}

/// Segmentation samples: each image holds 1-3 random axis-aligned
/// rectangles or disks on a `width x height` grid. Images are the mask plus
/// Gaussian pixel noise of std 0.2.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSet {
    pub batch: Batch,
    pub masks: Vec<BinaryMask>,
}

pub fn gen_shapes(width: usize, height: usize, n: usize, rng: &mut SeededRng) -> Result<ShapesSet> {
    if width < 2 || height < 2 || n == 0 {
        return Err(Error::Precondition(format!(
            "shapes need a grid >= 2x2 and n >= 1, got {width}x{height}, n = {n}"
        )));
    }
    let pixels = width * height;
    let mut inputs = Vec::with_capacity(n * pixels);
    let mut targets = Vec::with_capacity(n * pixels);
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let mut mask = BinaryMask::empty(width, height)?;
        for _ in 0..1 + rng.index(3) {
            if rng.index(2) == 0 {
                let (x0, y0) = (rng.index(width), rng.index(height));
                let (w, h) = (1 + rng.index(width / 2), 1 + rng.index(height / 2));
                for y in y0..(y0 + h).min(height) {
                    for x in x0..(x0 + w).min(width) {
                        mask.set(x, y, true);
                    }
                }
            } else {
                let (cx, cy) = (rng.uniform(0.0, width as f64), rng.uniform(0.0, height as f64));
                let r = rng.uniform(1.0, width.min(height) as f64 / 3.0 + 1.0);
                for y in 0..height {
                    for x in 0..width {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            mask.set(x, y, true);
                        }
                    }
                }
            }
        }
        for &on in mask.values() {
            let v = if on { 1.0 } else { 0.0 };
            inputs.push((v + 0.2 * rng.standard_normal()) as f32);
            targets.push(v as f32);
        }
        masks.push(mask);
    }
    let batch = Batch::new(Tensor::new(vec![n, pixels], inputs)?, Targets::Masks { values: targets, outputs: pixels })?;
    Ok(ShapesSet { batch, masks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(b: &Batch) -> &[usize] {
        match &b.targets {
            Targets::Classes { labels, .. } => labels,
            _ => unreachable!(),
        }
    }

    #[test]
    fn noiseless_moons_lie_on_their_arcs() {
        let b = gen_two_moons(201, 0.0, &mut SeededRng::new(1)).unwrap();
        for (p, &l) in b.inputs.data().chunks(2).zip(labels(&b)) {
            let (x, y) = (p[0] as f64, p[1] as f64);
            let r = if l == 0 { x.hypot(y) } else { (1.0 - x).hypot(0.5 - y) };
            assert!((r - 1.0).abs() < 1e-6);
            // Upper arc has y >= 0, lower arc y <= 0.5; each side of its centre.
            if l == 0 {
                assert!(y >= -1e-6);
            } else {
                assert!(y <= 0.5 + 1e-6);
            }
        }
        let ones = labels(&b).iter().filter(|&&l| l == 1).count();
        assert!(ones.abs_diff(201 - ones) <= 1);
    }

    #[test]
    fn zero_spread_blobs_sit_on_centroids() {
        let b = gen_blobs(50, 2, 0.0, &mut SeededRng::new(3)).unwrap();
        for (p, &l) in b.inputs.data().chunks(2).zip(labels(&b)) {
            let (cx, cy) = blob_centroid(l, 2);
            assert_eq!((p[0], p[1]), (cx as f32, cy as f32));
        }
        assert_eq!(labels(&b).iter().filter(|&&l| l == 0).count(), 25);
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(
            gen_two_moons(64, 0.1, &mut SeededRng::new(9)).unwrap(),
            gen_two_moons(64, 0.1, &mut SeededRng::new(9)).unwrap()
        );
        assert_eq!(
            gen_blobs(64, 3, 0.5, &mut SeededRng::new(9)).unwrap(),
            gen_blobs(64, 3, 0.5, &mut SeededRng::new(9)).unwrap()
        );
        assert_eq!(
            gen_shapes(8, 8, 4, &mut SeededRng::new(9)).unwrap(),
            gen_shapes(8, 8, 4, &mut SeededRng::new(9)).unwrap()
        );
    }

    #[test]
    fn shapes_have_foreground() {
        let s = gen_shapes(16, 16, 20, &mut SeededRng::new(5)).unwrap();
        assert!(s.masks.iter().all(|m| m.count() > 0));
        assert_eq!(s.batch.features(), 256);
    }

    #[test]
    fn degenerate_sizes_are_rejected() {
        assert!(gen_two_moons(1, 0.1, &mut SeededRng::new(0)).is_err());
        assert!(gen_two_moons(10, -0.1, &mut SeededRng::new(0)).is_err());
        assert!(gen_blobs(10, 1, 0.1, &mut SeededRng::new(0)).is_err());
        assert!(gen_shapes(1, 8, 3, &mut SeededRng::new(0)).is_err());
    }
}
