//! Feed-forward networks with hand-derived backpropagation.
//!
//! Parameters live in a [`ParamSet`] as `f32` tensors. Every forward and
//! backward pass runs in `f64` over a flat copy of the parameters, which lets
//! the same code path serve training, finite-difference oracles and
//! Hessian-vector products.

use crate::error::{Error, Result};
use crate::math::{SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    Activation(Activation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax over the outputs followed by cross-entropy against a class index.
    SoftmaxCe,
    /// Per-output sigmoid with binary cross-entropy, averaged over outputs.
    Bce,
}

/// One named parameter tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub prunable: bool,
}

/// Ordered, uniquely named parameter tensors. The flat view concatenates the
/// entries in order, each in row-major layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, prunable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape().to_vec())?;
        self.entries.push(ParamEntry { name, value, grad, prunable });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn set_prunable(&mut self, name: &str, prunable: bool) -> Result<()> {
        let entry = self.get_mut(name).ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))?;
        entry.prunable = prunable;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn prunable_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.entries.iter().filter(|e| e.prunable).flat_map(|e| e.value.data().iter().copied())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.value.data().iter().map(|&v| v as f64)).collect()
    }

    pub fn grads_to_flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.grad.data().iter().map(|&v| v as f64)).collect()
    }

    /// Overwrites the values from a flat vector, rounding to `f32`.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.write_flat(flat, |e| &mut e.value)
    }

    pub fn set_grads_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.write_flat(flat, |e| &mut e.grad)
    }

    fn write_flat(&mut self, flat: &[f64], pick: impl Fn(&mut ParamEntry) -> &mut Tensor) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Dimension(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for entry in &mut self.entries {
            let name = entry.name.clone();
            let t = pick(entry);
            for (dst, &src) in t.data_mut().iter_mut().zip(&flat[offset..]) {
                let v = src as f32;
                if !v.is_finite() {
                    return Err(Error::numeric(format!("non-finite value written to `{name}`")));
                }
                *dst = v;
            }
            offset += t.len();
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Offset of each entry in the flat view.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.entries
            .iter()
            .map(|e| {
                let o = acc;
                acc += e.value.len();
                o
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes {
        labels: Vec<usize>,
        num_classes: usize,
    },
    /// Row-major `batch × outputs` values in `{0, 1}`.
    Masks {
        values: Vec<f32>,
        outputs: usize,
    },
}

/// Inputs (`batch × features`) with matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        let rows = match inputs.shape() {
            [rows, _] => *rows,
            s => return Err(Error::Dimension(format!("batch inputs must be a matrix, got {s:?}"))),
        };
        match &targets {
            Targets::Classes { labels, num_classes } => {
                if labels.len() != rows {
                    return Err(Error::Dimension(format!("{} labels for {rows} rows", labels.len())));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= *num_classes) {
                    return Err(Error::Precondition(format!("label {bad} >= {num_classes} classes")));
                }
            }
            Targets::Masks { values, outputs } => {
                if values.len() != rows * outputs {
                    return Err(Error::Dimension(format!("{} mask values for {rows} rows of {outputs}", values.len())));
                }
                if values.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Precondition("mask targets must be 0 or 1".into()));
                }
            }
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        let f = self.features();
        let data = self.inputs.data();
        let mut inputs = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            inputs.extend_from_slice(&data[i * f..(i + 1) * f]);
        }
        let targets = match &self.targets {
            Targets::Classes { labels, num_classes } => {
                Targets::Classes { labels: indices.iter().map(|&i| labels[i]).collect(), num_classes: *num_classes }
            }
            Targets::Masks { values, outputs } => {
                let mut v = Vec::with_capacity(indices.len() * outputs);
                for &i in indices {
                    v.extend_from_slice(&values[i * outputs..(i + 1) * outputs]);
                }
                Targets::Masks { values: v, outputs: *outputs }
            }
        };
        Batch::new(Tensor::new(vec![indices.len(), f], inputs)?, targets)
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.targets {
            Targets::Classes { .. } => LossKind::SoftmaxCe,
            Targets::Masks { .. } => LossKind::Bce,
        }
    }
}

/// A validated stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    input_dim: usize,
    output_dim: usize,
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let mut width: Option<usize> = None;
        let mut input_dim = None;
        for (i, layer) in layers.iter().enumerate() {
            if let LayerSpec::Dense { in_dim, out_dim } = *layer {
                if in_dim == 0 || out_dim == 0 {
                    return Err(Error::Config(format!("layer {i}: dense extents must be positive")));
                }
                if let Some(w) = width {
                    if w != in_dim {
                        return Err(Error::Config(format!(
                            "layer {i}: expects {in_dim} inputs but previous dense layer yields {w}"
                        )));
                    }
                }
                input_dim.get_or_insert(in_dim);
                width = Some(out_dim);
            }
        }
        match (input_dim, width) {
            (Some(input_dim), Some(output_dim)) => Ok(Network { layers, input_dim, output_dim }),
            _ => Err(Error::Config("network needs at least one dense layer".into())),
        }
    }

    /// Dense layers with `activation` between consecutive ones, e.g.
    /// `[2, 32, 32, 2]` gives 2-32-32-2 with no activation after the last.
    pub fn mlp(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("mlp needs at least two widths".into()));
        }
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Activation(activation));
            }
            layers.push(LayerSpec::Dense { in_dim: w[0], out_dim: w[1] });
        }
        Network::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn dense_layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layers.iter().filter_map(|l| match *l {
            LayerSpec::Dense { in_dim, out_dim } => Some((in_dim, out_dim)),
            _ => None,
        })
    }

    pub fn num_params(&self) -> usize {
        self.dense_layers().map(|(i, o)| i * o + o).sum()
    }

    /// Dense weights drawn from normal(0, sqrt(2 / in_dim)), zero biases. The
    /// weight of dense layer `k` is `dense{k}.weight` with shape
    /// `[in_dim, out_dim]`; its bias is `dense{k}.bias`.
    pub fn init_params(&self, rng: &mut SeededRng) -> Result<ParamSet> {
        let mut params = ParamSet::new();
        for (k, (i, o)) in self.dense_layers().enumerate() {
            let std = (2.0 / i as f64).sqrt();
            let w = Tensor::new(vec![i, o], rng.draw_normal(i * o, 0.0, std)?)?;
            params.push(format!("dense{k}.weight"), w, true)?;
            params.push(format!("dense{k}.bias"), Tensor::zeros(vec![o])?, false)?;
        }
        Ok(params)
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        let expected: Vec<(usize, usize)> = self.dense_layers().collect();
        if params.len() != expected.len() * 2 {
            return Err(Error::Dimension(format!(
                "network has {} dense layers, parameter set has {} entries",
                expected.len(),
                params.len()
            )));
        }
        for (k, &(i, o)) in expected.iter().enumerate() {
            let w = &params.entries()[2 * k];
            let b = &params.entries()[2 * k + 1];
            if w.value.shape() != [i, o] || b.value.shape() != [o] {
                return Err(Error::Dimension(format!(
                    "dense layer {k} expects weight [{i}, {o}] and bias [{o}], got {:?} and {:?}",
                    w.value.shape(),
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_inputs(&self, x: &Tensor) -> Result<usize> {
        match x.shape() {
            [rows, f] if *f == self.input_dim => Ok(*rows),
            s => Err(Error::Dimension(format!("inputs of shape {s:?} for a network with {} features", self.input_dim))),
        }
    }

    /// Network outputs (logits or per-output scores) as a `rows × outputs` tensor.
    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        let rows = self.check_inputs(x)?;
        let flat = params.to_flat();
        let trace = self.run_forward(&flat, x)?;
        let out = trace.activations.last().expect("non-empty trace");
        Tensor::new(vec![rows, self.output_dim], out.iter().map(|&v| v as f32).collect())
    }

    /// Mean loss over the batch; analytic gradients of that mean are written
    /// into the grad buffers of `params`.
    pub fn loss_and_grad(&self, params: &mut ParamSet, batch: &Batch, kind: LossKind) -> Result<f64> {
        self.check_params(params)?;
        let flat = params.to_flat();
        let mut grad = vec![0.0; flat.len()];
        let loss = self.loss_flat(&flat, batch, kind, Some(&mut grad))?;
        params.set_grads_from_flat(&grad)?;
        Ok(loss)
    }

    /// Loss (and optionally its gradient) at a flat `f64` parameter vector laid
    /// out as in [`ParamSet::to_flat`].
    pub fn loss_flat(&self, w: &[f64], batch: &Batch, kind: LossKind, grad: Option<&mut [f64]>) -> Result<f64> {
        if w.len() != self.num_params() {
            return Err(Error::Dimension(format!("{} parameters for a network with {}", w.len(), self.num_params())));
        }
        let rows = self.check_inputs(&batch.inputs)?;
        if rows == 0 {
            return Err(Error::Precondition("empty batch".into()));
        }
        if kind != batch.loss_kind() {
            return Err(Error::Precondition(format!("loss {kind:?} does not match the batch targets")));
        }
        let trace = self.run_forward(w, &batch.inputs)?;
        let out = trace.activations.last().expect("non-empty trace");
        let (loss, d_out) = output_loss(out, &batch.targets, self.output_dim)?;
        if let Some(grad) = grad {
            self.backward(w, &trace, d_out, rows, grad);
        }
        Ok(loss)
    }

    fn run_forward(&self, w: &[f64], x: &Tensor) -> Result<Trace> {
        let rows = x.shape()[0];
        let mut activations: Vec<Vec<f64>> = vec![x.data().iter().map(|&v| v as f64).collect()];
        let mut width = self.input_dim;
        let mut offset = 0;
        for layer in &self.layers {
            let input = activations.last().expect("input present");
            let next = match *layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let weight = &w[offset..offset + in_dim * out_dim];
                    let bias = &w[offset + in_dim * out_dim..offset + in_dim * out_dim + out_dim];
                    offset += in_dim * out_dim + out_dim;
                    let mut out = vec![0.0; rows * out_dim];
                    crate::math::matmul_f64(input, weight, rows, in_dim, out_dim, &mut out);
                    for row in out.chunks_mut(out_dim) {
                        for (o, b) in row.iter_mut().zip(bias) {
                            *o += b;
                        }
                    }
                    width = out_dim;
                    out
                }
                LayerSpec::Activation(a) => input.iter().map(|&v| a.apply(v)).collect(),
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("non-finite activation in forward pass"));
            }
            activations.push(next);
        }
        debug_assert_eq!(width, self.output_dim);
        Ok(Trace { activations })
    }

    fn backward(&self, w: &[f64], trace: &Trace, mut delta: Vec<f64>, rows: usize, grad: &mut [f64]) {
        let mut offset = w.len();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[li];
            match *layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    offset -= in_dim * out_dim + out_dim;
                    let weight = &w[offset..offset + in_dim * out_dim];
                    let (gw, gb) = grad[offset..offset + in_dim * out_dim + out_dim].split_at_mut(in_dim * out_dim);
                    gw.fill(0.0);
                    gb.fill(0.0);
                    for r in 0..rows {
                        let x = &input[r * in_dim..(r + 1) * in_dim];
                        let d = &delta[r * out_dim..(r + 1) * out_dim];
                        for (i, &xi) in x.iter().enumerate() {
                            let row = &mut gw[i * out_dim..(i + 1) * out_dim];
                            for (g, &dj) in row.iter_mut().zip(d) {
                                *g += xi * dj;
                            }
                        }
                        for (g, &dj) in gb.iter_mut().zip(d) {
                            *g += dj;
                        }
                    }
                    if li > 0 {
                        let mut prev = vec![0.0; rows * in_dim];
                        for r in 0..rows {
                            let d = &delta[r * out_dim..(r + 1) * out_dim];
                            for i in 0..in_dim {
                                let wrow = &weight[i * out_dim..(i + 1) * out_dim];
                                prev[r * in_dim + i] = wrow.iter().zip(d).map(|(a, b)| a * b).sum();
                            }
                        }
                        delta = prev;
                    }
                }
                LayerSpec::Activation(a) => {
                    let output = &trace.activations[li + 1];
                    for ((d, &x), &y) in delta.iter_mut().zip(input).zip(output) {
                        *d *= a.derivative(x, y);
                    }
                }
            }
        }
    }
}

struct Trace {
    /// `activations[0]` is the input; `activations[i + 1]` is the output of layer `i`.
    activations: Vec<Vec<f64>>,
}

/// Mean loss over rows and the gradient of that mean with respect to the outputs.
fn output_loss(out: &[f64], targets: &Targets, width: usize) -> Result<(f64, Vec<f64>)> {
    let rows = out.len() / width;
    let inv_rows = 1.0 / rows as f64;
    let mut d = vec![0.0; out.len()];
    let mut total = 0.0;
    match targets {
        Targets::Classes { labels, num_classes } => {
            if *num_classes != width {
                return Err(Error::Dimension(format!("{num_classes} classes for {width} outputs")));
            }
            for (r, &y) in labels.iter().enumerate() {
                let z = &out[r * width..(r + 1) * width];
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
                let lse = m + sum.ln();
                total += lse - z[y];
                let dr = &mut d[r * width..(r + 1) * width];
                for (j, g) in dr.iter_mut().enumerate() {
                    *g = (z[j] - lse).exp() * inv_rows;
                }
                dr[y] -= inv_rows;
            }
        }
        Targets::Masks { values, outputs } => {
            if *outputs != width {
                return Err(Error::Dimension(format!("{outputs} mask outputs for {width} network outputs")));
            }
            let scale = inv_rows / width as f64;
            for (i, (&z, &y)) in out.iter().zip(values).enumerate() {
                let y = y as f64;
                total += (z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()) / width as f64;
                d[i] = (sigmoid(z) - y) * scale;
            }
        }
    }
    let loss = total * inv_rows;
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite loss"));
    }
    Ok((loss, d))
}

/// Central differences `(f(w + h e_i) - f(w - h e_i)) / (2h)` for every
/// coordinate. The divisor is the realised step, so coordinates stored at
/// reduced precision by `f` stay consistent.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, w: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Precondition(format!("finite-difference step {h} must be positive")));
    }
    let mut probe = w.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        probe[i] = w[i] + h;
        let up = f(&probe)?;
        probe[i] = w[i] - h;
        let down = f(&probe)?;
        probe[i] = w[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Finite-difference gradient of the mean batch loss, flat and in
/// [`ParamSet::to_flat`] order.
pub fn finite_diff_grad(net: &Network, params: &ParamSet, batch: &Batch, kind: LossKind, h: f64) -> Result<Vec<f64>> {
    net.check_params(params)?;
    central_difference(|w| net.loss_flat(w, batch, kind, None), &params.to_flat(), h)
}

/// Predicted class per row (first maximum wins).
pub fn argmax_rows(outputs: &Tensor) -> Vec<usize> {
    let width = outputs.shape().get(1).copied().unwrap_or(1);
    outputs
        .data()
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
