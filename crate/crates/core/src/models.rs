//! Small classifiers with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Each dense layer stores its weights
//! input-major (`fan_in x fan_out`, row-major) followed by its bias, so the
//! forward pass is a sequence of row axpys that skip zero activations.
//! MNIST pixels and ReLU outputs are mostly zero, which that exploits.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vector::check_dims;

/// Layer widths from input to logits. Hidden layers use ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    sizes: Vec<usize>,
}

/// Index ranges of one dense layer inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

/// One dense layer in unflattened form.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// A flat parameter vector tied to its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
}

/// A labelled minibatch; rows borrow from the owning dataset.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    rows: Vec<&'a [f64]>,
    labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(rows: Vec<&'a [f64]>, labels: Vec<usize>) -> Result<Self> {
        check_dims(rows.len(), labels.len())?;
        if let Some(first) = rows.first() {
            for r in &rows[1..] {
                check_dims(first.len(), r.len())?;
            }
        }
        Ok(Self { rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[&'a [f64]] {
        &self.rows
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `logsumexp(logits) - logits[label]`, computed stably.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Index of the largest logit, lowest index on ties; NaNs never win.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, z) in logits.iter().enumerate().skip(1) {
        if *z > logits[best] {
            best = i;
        }
    }
    best
}

/// Layers at least this wide accumulate weight gradients column by column.
const WIDE: usize = 32;

/// Column-wise view of the nonzeros of a batch of rows.
#[derive(Default)]
struct SparseColumns {
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl SparseColumns {
    fn fill<'r>(&mut self, n: usize, width: usize, row: impl Fn(usize) -> &'r [f64]) {
        self.offsets.clear();
        self.offsets.resize(width + 1, 0);
        for i in 0..n {
            for (j, &a) in row(i).iter().enumerate() {
                if a != 0.0 {
                    self.offsets[j + 1] += 1;
                }
            }
        }
        for j in 0..width {
            self.offsets[j + 1] += self.offsets[j];
        }
        self.entries.clear();
        self.entries.resize(self.offsets[width], (0, 0.0));
        let mut next = self.offsets[..width].to_vec();
        for i in 0..n {
            for (j, &a) in row(i).iter().enumerate() {
                if a != 0.0 {
                    self.entries[next[j]] = (i as u32, a);
                    next[j] += 1;
                }
            }
        }
    }

    fn column(&self, j: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[j]..self.offsets[j + 1]]
    }
}

impl Architecture {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
            return Err(invalid("architecture", format!("need at least two nonzero widths, got {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    /// Input -> hidden (ReLU) -> logits.
    pub fn mlp(input: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::new(vec![input, hidden, classes])
    }

    /// Linear softmax classifier.
    pub fn logistic(input: usize, classes: usize) -> Result<Self> {
        Self::new(vec![input, classes])
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let bias = weights.end..weights.end + fan_out;
                offset = bias.end;
                LayerShape {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                }
            })
            .collect()
    }

    /// Total number of parameters.
    pub fn dim(&self) -> usize {
        self.layer_shapes().last().map_or(0, |l| l.bias.end)
    }

    pub fn unflatten(&self, params: &[f64]) -> Result<Vec<Layer>> {
        check_dims(self.dim(), params.len())?;
        Ok(self
            .layer_shapes()
            .into_iter()
            .map(|s| Layer {
                weights: params[s.weights].to_vec(),
                bias: params[s.bias].to_vec(),
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[Layer]) -> Result<ModelParams> {
        let shapes = self.layer_shapes();
        check_dims(shapes.len(), layers.len())?;
        let mut values = Vec::with_capacity(self.dim());
        for (s, l) in shapes.iter().zip(layers) {
            check_dims(s.fan_in * s.fan_out, l.weights.len())?;
            check_dims(s.fan_out, l.bias.len())?;
            values.extend_from_slice(&l.weights);
            values.extend_from_slice(&l.bias);
        }
        Ok(ModelParams { values })
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(&self, rng: &mut impl Rng) -> ModelParams {
        let mut values = vec![0.0; self.dim()];
        for s in self.layer_shapes() {
            let limit = (6.0 / (s.fan_in + s.fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            values[s.weights].iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        ModelParams { values }
    }

    fn check_input(&self, params: &[f64], batch: &Batch<'_>) -> Result<()> {
        check_dims(self.dim(), params.len())?;
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        check_dims(self.input_dim(), batch.rows[0].len())?;
        let classes = self.num_classes();
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(())
    }

    fn activation_buffers(&self) -> Vec<Vec<f64>> {
        self.sizes[1..].iter().map(|n| vec![0.0; *n]).collect()
    }

    /// Runs one sample forward; `acts[l]` receives layer `l`'s output
    /// (post-ReLU for hidden layers, raw logits for the last).
    fn forward(&self, shapes: &[LayerShape], params: &[f64], x: &[f64], acts: &mut [Vec<f64>]) {
        let last = shapes.len() - 1;
        for (l, s) in shapes.iter().enumerate() {
            let (done, rest) = acts.split_at_mut(l);
            let input: &[f64] = if l == 0 { x } else { &done[l - 1] };
            let out = &mut rest[0];
            out.copy_from_slice(&params[s.bias.clone()]);
            let w = &params[s.weights.clone()];
            for (j, &a) in input.iter().enumerate() {
                if a != 0.0 {
                    axpy(a, &w[j * s.fan_out..(j + 1) * s.fan_out], out);
                }
            }
            if l != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    pub fn logits(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.dim(), params.len())?;
        check_dims(self.input_dim(), x.len())?;
        let shapes = self.layer_shapes();
        let mut acts = self.activation_buffers();
        self.forward(&shapes, params, x, &mut acts);
        Ok(acts.pop().unwrap())
    }

    /// Layer outputs for every sample of `rows`, row-major per layer.
    fn forward_batch(&self, shapes: &[LayerShape], params: &[f64], rows: &[&[f64]]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = self.sizes[1..].iter().map(|w| vec![0.0; rows.len() * w]).collect();
        let mut scratch = self.activation_buffers();
        for (i, x) in rows.iter().enumerate() {
            self.forward(shapes, params, x, &mut scratch);
            for (all, one) in acts.iter_mut().zip(&scratch) {
                all[i * one.len()..(i + 1) * one.len()].copy_from_slice(one);
            }
        }
        acts
    }

    /// Mean cross-entropy over the batch and its exact gradient.
    pub fn loss_grad(&self, params: &[f64], batch: &Batch<'_>) -> Result<LossGrad> {
        self.check_input(params, batch)?;
        let shapes = self.layer_shapes();
        let n = batch.len();
        let inv_n = 1.0 / n as f64;
        let classes = self.num_classes();
        let acts = self.forward_batch(&shapes, params, &batch.rows);

        // softmax - onehot, scaled by 1/n
        let mut loss = 0.0;
        let mut delta = acts.last().unwrap().clone();
        for (top, &label) in delta.chunks_exact_mut(classes).zip(&batch.labels) {
            loss += cross_entropy(top, label);
            let max = top.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for d in top.iter_mut() {
                *d = (*d - max).exp();
                z += *d;
            }
            top.iter_mut().for_each(|d| *d *= inv_n / z);
            top[label] -= inv_n;
        }

        let mut grad = vec![0.0; params.len()];
        let mut cols = SparseColumns::default();
        for l in (0..shapes.len()).rev() {
            let s = &shapes[l];
            let fo = s.fan_out;
            let input_row = |i: usize| -> &[f64] {
                if l == 0 {
                    batch.rows[i]
                } else {
                    &acts[l - 1][i * s.fan_in..(i + 1) * s.fan_in]
                }
            };
            let gb = &mut grad[s.bias.clone()];
            for d in delta.chunks_exact(fo) {
                axpy(1.0, d, gb);
            }
            let gw = &mut grad[s.weights.clone()];
            if fo >= WIDE {
                // Column order writes each gradient row once per step.
                cols.fill(n, s.fan_in, input_row);
                for (j, row) in gw.chunks_exact_mut(fo).enumerate() {
                    for &(i, a) in cols.column(j) {
                        let i = i as usize;
                        axpy(a, &delta[i * fo..(i + 1) * fo], row);
                    }
                }
            } else {
                for i in 0..n {
                    let d = &delta[i * fo..(i + 1) * fo];
                    for (j, &a) in input_row(i).iter().enumerate() {
                        if a != 0.0 {
                            axpy(a, d, &mut gw[j * fo..(j + 1) * fo]);
                        }
                    }
                }
            }
            if l > 0 {
                let w = &params[s.weights.clone()];
                let mut below = vec![0.0; n * s.fan_in];
                for i in 0..n {
                    let d = &delta[i * fo..(i + 1) * fo];
                    let a = input_row(i);
                    for (j, out) in below[i * s.fan_in..(i + 1) * s.fan_in].iter_mut().enumerate() {
                        if a[j] > 0.0 {
                            *out = w[j * fo..(j + 1) * fo].iter().zip(d).map(|(wi, di)| wi * di).sum();
                        }
                    }
                }
                delta = below;
            }
        }
        Ok(LossGrad {
            loss: loss * inv_n,
            grad,
        })
    }

    /// Top-1 accuracy and mean cross-entropy.
    pub fn evaluate(&self, params: &[f64], test: &Batch<'_>) -> Result<Evaluation> {
        self.check_input(params, test)?;
        let shapes = self.layer_shapes();
        let mut acts = self.activation_buffers();
        let mut correct = 0usize;
        let mut loss = 0.0;
        for (x, &label) in test.rows.iter().zip(&test.labels) {
            self.forward(&shapes, params, x, &mut acts);
            let logits = acts.last().unwrap();
            if argmax(logits) == label {
                correct += 1;
            }
            loss += cross_entropy(logits, label);
        }
        let n = test.len() as f64;
        Ok(Evaluation {
            accuracy: correct as f64 / n,
            loss: loss / n,
        })
    }
}

/// Loss and gradient of the two-layer ReLU perceptron.
pub fn mlp_loss_grad(arch: &Architecture, params: &[f64], batch: &Batch<'_>) -> Result<LossGrad> {
    if arch.sizes.len() != 3 {
        return Err(invalid("architecture", "expected exactly one hidden layer"));
    }
    arch.loss_grad(params, batch)
}

/// Loss and gradient of the linear softmax classifier.
pub fn logistic_loss_grad(arch: &Architecture, params: &[f64], batch: &Batch<'_>) -> Result<LossGrad> {
    if arch.sizes.len() != 2 {
        return Err(invalid("architecture", "expected no hidden layer"));
    }
    arch.loss_grad(params, batch)
}

pub fn evaluate(arch: &Architecture, params: &[f64], test: &Batch<'_>) -> Result<Evaluation> {
    arch.evaluate(params, test)
}
