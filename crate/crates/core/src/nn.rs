//! Minimal dense feed-forward network: ReLU hidden layers, linear output,
//! mean softmax cross-entropy, plain mini-batch SGD.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Layer widths `[input, hidden.., classes]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    sizes: Vec<usize>,
}

impl ModelShape {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Dimension(
                "a model needs at least an input and an output width".into(),
            ));
        }
        if sizes.contains(&0) {
            return Err(Error::Dimension(format!("layer widths must be positive: {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    pub fn from_parts(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Self::new(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    /// Widths of the maskable (hidden) layers.
    pub fn hidden(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }
}

/// One fully connected layer. Neuron `i` owns weight row `i` and bias `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub biases: Tensor,
}

impl DenseLayer {
    pub fn new(weights: Tensor, biases: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 || biases.shape().len() != 1 {
            return Err(Error::Dimension("weights must be rank 2 and biases rank 1".into()));
        }
        if weights.rows() != biases.len() {
            return Err(Error::Dimension(format!(
                "{} weight rows but {} biases",
                weights.rows(),
                biases.len()
            )));
        }
        Ok(Self { weights, biases })
    }

    pub fn zeros(out_units: usize, in_units: usize) -> Self {
        Self {
            weights: Tensor::zeros(vec![out_units, in_units]),
            biases: Tensor::zeros(vec![out_units]),
        }
    }

    pub fn out_units(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_units(&self) -> usize {
        self.weights.cols()
    }

    /// Weight row followed by the bias: the parameter set of one neuron.
    pub fn neuron_params(&self, i: usize) -> Vec<f64> {
        let mut v = self.weights.row(i).to_vec();
        v.push(self.biases.data()[i]);
        v
    }
}

/// Parameters of a whole network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub layers: Vec<DenseLayer>,
}

impl Model {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("model has no layers".into()));
        }
        for (j, pair) in layers.windows(2).enumerate() {
            if pair[1].in_units() != pair[0].out_units() {
                return Err(Error::Dimension(format!(
                    "layer {} expects {} inputs but layer {j} has {} outputs",
                    j + 1,
                    pair[1].in_units(),
                    pair[0].out_units()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(shape: &ModelShape, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let layers = shape
            .sizes()
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                DenseLayer {
                    weights: Tensor::new(vec![fan_out, fan_in], data).expect("sized above"),
                    biases: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.out_units(), l.in_units()))
                .collect(),
        }
    }

    pub fn shape(&self) -> ModelShape {
        let mut sizes = vec![self.layers[0].in_units()];
        sizes.extend(self.layers.iter().map(DenseLayer::out_units));
        ModelShape { sizes }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.biases.data());
        }
        out
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.data_mut().iter_mut().chain(l.biases.data_mut().iter_mut()))
    }

    /// `self -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &Model, lr: f64) {
        let g = grads.flatten();
        for (w, d) in self.params_mut().zip(g) {
            *w -= lr * d;
        }
    }
}

/// Local optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        // zero is allowed: it turns local training into a no-op
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Input("learning_rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::Input("batch_size and local_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Features `[n, dim]` with one class id per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl DataBatch {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Dimension("features must be a rank-2 tensor".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, rows: &[usize]) -> Result<DataBatch> {
        let features = self.features.select_rows(rows)?;
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        DataBatch::new(features, labels)
    }
}

fn check_batch(model: &Model, batch: &DataBatch) -> Result<()> {
    let in_units = model.layers[0].in_units();
    if batch.dim() != in_units {
        return Err(Error::Dimension(format!(
            "batch has {} features, model expects {in_units}",
            batch.dim()
        )));
    }
    let classes = model.layers.last().expect("non-empty").out_units();
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// `out[r, o] = b[o] + Σ_i x[r, i] * w[o, i]`
fn affine(x: &[f64], n: usize, layer: &DenseLayer) -> Vec<f64> {
    let (out_u, in_u) = (layer.out_units(), layer.in_units());
    let w = layer.weights.data();
    let b = layer.biases.data();
    let mut out = vec![0.0; n * out_u];
    for r in 0..n {
        let xr = &x[r * in_u..(r + 1) * in_u];
        let or = &mut out[r * out_u..(r + 1) * out_u];
        for (o, slot) in or.iter_mut().enumerate() {
            let wr = &w[o * in_u..(o + 1) * in_u];
            *slot = b[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

/// Pre-activations of every layer and post-activation inputs to each layer.
struct Trace {
    /// `inputs[j]` is the input to layer `j` (post-ReLU for j > 0).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer; the last entry is the logits.
    pre: Vec<Vec<f64>>,
}

fn run_forward(model: &Model, batch: &DataBatch) -> Trace {
    let n = batch.len();
    let last = model.layers.len() - 1;
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut current = batch.features.data().to_vec();
    for (j, layer) in model.layers.iter().enumerate() {
        let z = affine(&current, n, layer);
        inputs.push(current);
        current = if j < last {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            Vec::new()
        };
        pre.push(z);
    }
    Trace { inputs, pre }
}

/// Logits `[n, classes]`. Hidden layers use ReLU; the output layer is linear.
pub fn forward(model: &Model, batch: &DataBatch) -> Result<Tensor> {
    check_batch(model, batch)?;
    let classes = model.layers.last().expect("non-empty").out_units();
    let mut trace = run_forward(model, batch);
    let logits = trace.pre.pop().expect("non-empty");
    Tensor::new(vec![batch.len(), classes], logits)
}

/// Row-wise softmax of `[n, classes]` logits.
pub fn softmax_rows(logits: &Tensor) -> Vec<f64> {
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    debug_assert_eq!(out.len(), logits.rows() * c);
    out
}

/// Per-row cross-entropy and the softmax probabilities.
fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut losses = Vec::with_capacity(labels.len());
    let mut probs = Vec::with_capacity(logits.len());
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        losses.push(log_z - row[label]);
        probs.extend(row.iter().map(|v| (v - log_z).exp()));
    }
    (losses, probs)
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grads(model: &Model, batch: &DataBatch) -> Result<(f64, Model)> {
    check_batch(model, batch)?;
    let n = batch.len();
    let classes = model.layers.last().expect("non-empty").out_units();
    let trace = run_forward(model, batch);
    let (losses, probs) = cross_entropy(trace.pre.last().expect("non-empty"), classes, &batch.labels);
    let loss = losses.iter().sum::<f64>() / n as f64;

    // dL/dlogits = (softmax - onehot) / n
    let inv_n = 1.0 / n as f64;
    let mut delta = probs;
    for (r, &label) in batch.labels.iter().enumerate() {
        delta[r * classes + label] -= 1.0;
    }
    delta.iter_mut().for_each(|d| *d *= inv_n);

    let mut grads = model.zeros_like();
    for j in (0..model.layers.len()).rev() {
        let layer = &model.layers[j];
        let (out_u, in_u) = (layer.out_units(), layer.in_units());
        let input = &trace.inputs[j];
        let g = &mut grads.layers[j];
        {
            let gw = g.weights.data_mut();
            for r in 0..n {
                let dr = &delta[r * out_u..(r + 1) * out_u];
                let xr = &input[r * in_u..(r + 1) * in_u];
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (gwi, &x) in gw[o * in_u..(o + 1) * in_u].iter_mut().zip(xr) {
                        *gwi += d * x;
                    }
                }
            }
        }
        {
            let gb = g.biases.data_mut();
            for r in 0..n {
                for (o, slot) in gb.iter_mut().enumerate() {
                    *slot += delta[r * out_u + o];
                }
            }
        }
        if j == 0 {
            break;
        }
        let w = layer.weights.data();
        let pre_prev = &trace.pre[j - 1];
        let mut next = vec![0.0; n * in_u];
        for r in 0..n {
            let dr = &delta[r * out_u..(r + 1) * out_u];
            let nr = &mut next[r * in_u..(r + 1) * in_u];
            for (o, &d) in dr.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (slot, &wv) in nr.iter_mut().zip(&w[o * in_u..(o + 1) * in_u]) {
                    *slot += d * wv;
                }
            }
            for (slot, &z) in nr.iter_mut().zip(&pre_prev[r * in_u..(r + 1) * in_u]) {
                if z <= 0.0 {
                    *slot = 0.0;
                }
            }
        }
        delta = next;
    }

    if !loss.is_finite() || grads.flatten().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    Ok((loss, grads))
}

/// Result of a client's local training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainResult {
    pub model: Model,
    pub n_examples: usize,
    /// Example-weighted mean of the mini-batch losses seen during training.
    pub train_loss: f64,
}

/// SGD over shuffled mini-batches for `local_epochs` passes of the shard.
pub fn local_train(model: &Model, shard: &DataBatch, hp: &Hyperparams) -> Result<LocalTrainResult> {
    hp.validate()?;
    if shard.is_empty() {
        return Err(Error::Input("cannot train on an empty shard".into()));
    }
    check_batch(model, shard)?;
    let mut rng = rng_from(hp.seed);
    let mut model = model.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    for _ in 0..hp.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch_size) {
            let batch = shard.select(chunk)?;
            let (loss, grads) = loss_and_grads(&model, &batch)?;
            model.sgd_step(&grads, hp.learning_rate);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
    }
    Ok(LocalTrainResult {
        model,
        n_examples: shard.len(),
        train_loss: loss_sum / seen as f64,
    })
}

/// Mean cross-entropy and argmax accuracy (ties go to the lowest class id).
pub fn evaluate(model: &Model, data: &DataBatch) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on empty data".into()));
    }
    let logits = forward(model, data)?;
    let classes = logits.cols();
    let (losses, _) = cross_entropy(logits.data(), classes, &data.labels);
    let correct = data
        .labels
        .iter()
        .enumerate()
        .filter(|&(r, &label)| argmax(logits.row(r)) == label)
        .count();
    let n = data.len() as f64;
    Ok((losses.iter().sum::<f64>() / n, correct as f64 / n))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
