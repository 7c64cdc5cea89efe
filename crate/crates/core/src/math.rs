//! Dense tensors, matrix products, the population variance primitive and the
//! seeded random stream used throughout the crate.
//!
//! Reductions run sequentially in index order so every result is bitwise
//! reproducible. Parameters and data are stored as `f32`; variance is
//! accumulated in `f64`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const MAX_RANK: usize = 4;

/// Row-major `f32` tensor of rank at most four.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!("shape {shape:?} holds {expected} values, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("tensor value {i} is {}", data[i])));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Tensor { shape, data: vec![0.0; n] })
    }

    /// Builds a matrix from rows of equal length.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Matrix product with `f64` accumulation in ascending inner index order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims()?;
        let (k2, n) = other.matrix_dims()?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner extents {k} and {k2}")));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for t in 0..k {
                    acc += self.data[i * k + t] as f64 * other.data[t * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        Tensor::new(vec![m, n], out)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::Dimension(format!("rank {} exceeds {MAX_RANK}", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::Dimension(format!("shape {shape:?} has a zero extent")));
    }
    Ok(())
}

/// `out[m×n] = a[m×k] · b[k×n]` on raw row-major `f64` buffers. Accumulates in
/// ascending inner index order; `out` is overwritten.
pub fn matmul_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Mean squared deviation with `1/n` normalization, accumulated in `f64`.
pub fn population_variance<T: Copy + Into<f64>>(values: &[T]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Precondition("variance of an empty vector".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v.into()).sum::<f64>() / n;
    let ss: f64 = values
        .iter()
        .map(|&v| {
            let d = v.into() - mean;
            d * d
        })
        .sum();
    Ok(ss / n)
}

/// Deterministic random stream.
///
/// The generator is ChaCha8 (`rand_chacha`) seeded through `seed_from_u64`;
/// normal draws use `rand_distr::StandardNormal` in `f64`. The seed to stream
/// mapping is stable across platforms.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// An independent stream derived from the same seed. Distinct `stream`
    /// values never overlap.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        SeededRng { seed: self.seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draw_normal(&mut self, n: usize, mean: f64, std: f64) -> Result<Vec<f32>> {
        Ok(self.draw_normal_f64(n, mean, std)?.into_iter().map(|v| v as f32).collect())
    }

    pub fn draw_normal_f64(&mut self, n: usize, mean: f64, std: f64) -> Result<Vec<f64>> {
        if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::Precondition(format!("normal(mean={mean}, std={std})")));
        }
        Ok((0..n)
            .map(|_| {
                let z: f64 = self.inner.sample(StandardNormal);
                mean + std * z
            })
            .collect())
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
