//! Classification accuracy and binary segmentation metrics.

use crate::error::{Error, Result};

/// Row-major binary grid; `values[y * width + x]` is pixel `(x, y)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, values: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension("mask extents must be positive".into()));
        }
        if values.len() != width * height {
            return Err(Error::Dimension(format!("{} values for a {width}x{height} mask", values.len())));
        }
        Ok(BinaryMask { width, height, values })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        BinaryMask::new(width, height, vec![false; width * height])
    }

    /// Foreground wherever `score > threshold`.
    pub fn from_scores(width: usize, height: usize, scores: &[f32], threshold: f32) -> Result<Self> {
        BinaryMask::new(width, height, scores.iter().map(|&s| s > threshold).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.values[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Foreground pixel coordinates `(x, y)` in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        self.values.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| (i % self.width, i / self.width)).collect()
    }

    fn check_same_extent(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Dimension(format!(
                "mask extents {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    pred.check_same_extent(gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Precondition("accuracy of an empty prediction set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// `2TP / (2TP + FP + FN)`, with 1.0 when both masks are empty.
pub fn f1_binary(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    if c.tp + c.fp + c.fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64)
}

/// `TP / (TP + alpha FP + beta FN)`, with 1.0 when both masks are empty and
/// 0.0 whenever there are no true positives otherwise.
pub fn tversky(pred: &BinaryMask, gt: &BinaryMask, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha >= 0.0) || !(beta >= 0.0) {
        return Err(Error::Precondition(format!("tversky weights ({alpha}, {beta}) must be nonnegative")));
    }
    let c = confusion(pred, gt)?;
    if c.tp + c.fp + c.fn_ == 0 {
        return Ok(1.0);
    }
    if c.tp == 0 {
        return Ok(0.0);
    }
    let tp = c.tp as f64;
    Ok(tp / (tp + alpha * c.fp as f64 + beta * c.fn_ as f64))
}

/// Symmetric Hausdorff distance between the foreground pixel sets, in pixels.
///
/// Both empty gives 0; exactly one empty gives the grid diagonal
/// `sqrt(width^2 + height^2)`, which exceeds every attainable distance.
/// Directed distances are read off an exact squared Euclidean distance
/// transform of the other mask.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same_extent(gt)?;
    match (pred.count(), gt.count()) {
        (0, 0) => return Ok(0.0),
        (0, _) | (_, 0) => return Ok(grid_diagonal(pred)),
        _ => {}
    }
    let to_gt = squared_distance_transform(gt);
    let to_pred = squared_distance_transform(pred);
    let directed = |from: &BinaryMask, field: &[f64]| {
        from.values.iter().zip(field).filter(|(&on, _)| on).map(|(_, &d)| d).fold(0.0, f64::max)
    };
    Ok(directed(pred, &to_gt).max(directed(gt, &to_pred)).sqrt())
}

pub fn grid_diagonal(mask: &BinaryMask) -> f64 {
    ((mask.width * mask.width + mask.height * mask.height) as f64).sqrt()
}

/// Squared distance from every pixel to the nearest foreground pixel, via the
/// separable lower-envelope-of-parabolas transform. Values are exact integers.
fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    let far = ((w * w + h * h) as f64 + 1.0) * 4.0;
    let mut grid: Vec<f64> = mask.values.iter().map(|&v| if v { 0.0 } else { far }).collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| grid[y * w + x]));
        envelope_1d(&line, &mut out);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line.clear();
        line.extend_from_slice(&grid[y * w..(y + 1) * w]);
        envelope_1d(&line, &mut out);
        grid[y * w..(y + 1) * w].copy_from_slice(&out);
    }
    grid
}

fn envelope_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 0.0);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}
