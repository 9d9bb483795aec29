//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the code path it checks.

#![allow(dead_code)]

use invdrop::cli::ExperimentConfig;
use invdrop::nn::{evaluate, local_train, loss_and_grads, DataBatch, Hyperparams, Model, ModelShape};
use invdrop::rng::{derive_seed, rng_from, tag};
use invdrop::sim::SimConfig;
use invdrop::submodel::{CoordinateUpdate, NeuronMask, SubModel};
use invdrop::tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;

pub const REFERENCE_TOML: &str = include_str!("../../configs/reference.toml");
pub const LABEL_SKEW_TOML: &str = include_str!("../../configs/label_skew.toml");
pub const SCALE_TOML: &str = include_str!("../../configs/scale.toml");

pub fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).expect("bundled config parses")
}

/// Glorot init plus non-zero biases so bias gradients are exercised.
pub fn random_model(shape: &ModelShape, seed: u64) -> Model {
    let mut m = Model::init(shape, seed);
    let mut rng = rng_from(seed ^ 0xB1A5);
    for l in &mut m.layers {
        for b in l.biases.data_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    m
}

pub fn random_batch(dim: usize, classes: usize, n: usize, seed: u64) -> DataBatch {
    let mut rng = rng_from(seed);
    let data = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    DataBatch::new(Tensor::new(vec![n, dim], data).unwrap(), labels).unwrap()
}

fn loss_of(model: &Model, batch: &DataBatch) -> f64 {
    loss_and_grads(model, batch).unwrap().0
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over
/// every parameter, with central differences of step `h`.
pub fn gradient_check(model: &Model, batch: &DataBatch, h: f64, floor: f64) -> f64 {
    let analytic = loss_and_grads(model, batch).unwrap().1.flatten();
    let mut numeric = Vec::with_capacity(analytic.len());
    for j in 0..model.layers.len() {
        for which in 0..2 {
            let len = if which == 0 {
                model.layers[j].weights.len()
            } else {
                model.layers[j].biases.len()
            };
            for i in 0..len {
                let bump = |delta: f64| {
                    let mut m = model.clone();
                    let t = if which == 0 { &mut m.layers[j].weights } else { &mut m.layers[j].biases };
                    t.data_mut()[i] += delta;
                    loss_of(&m, batch)
                };
                numeric.push((bump(h) - bump(-h)) / (2.0 * h));
            }
        }
    }
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Non-empty random subset per hidden layer.
pub fn random_neuron_mask(shape: &ModelShape, rng: &mut impl Rng) -> NeuronMask {
    let kept = shape
        .hidden()
        .iter()
        .map(|&k| {
            let n = rng.random_range(1..=k);
            let mut idx = sample(rng, k, n).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    NeuronMask::new(kept).unwrap()
}

/// Random parameters shaped like the sub-model of `mask`.
pub fn random_update(shape: &ModelShape, mask: NeuronMask, client_id: usize, rng: &mut impl Rng) -> CoordinateUpdate {
    let sub = mask.sub_shape(shape);
    let mut m = Model::init(&sub, rng.random());
    for l in &mut m.layers {
        for v in l.weights.data_mut().iter_mut().chain(l.biases.data_mut()) {
            *v = rng.random_range(-3.0..3.0);
        }
    }
    CoordinateUpdate {
        client_id,
        mask,
        params: SubModel(m),
        n_examples: rng.random_range(1..50),
    }
}

/// One to four updates, each a full or random partial mask.
pub fn mixed_updates(shape: &ModelShape, seed: u64) -> Vec<CoordinateUpdate> {
    let mut rng = rng_from(seed);
    let n = rng.random_range(1..=4);
    (0..n)
        .map(|id| {
            let mask = if rng.random_bool(0.4) {
                NeuronMask::full(shape)
            } else {
                random_neuron_mask(shape, &mut rng)
            };
            random_update(shape, mask, id, &mut rng)
        })
        .collect()
}

/// Rows of global layer `j` kept by `mask`; the output layer keeps all.
fn kept_rows(shape: &ModelShape, mask: &NeuronMask, j: usize) -> Vec<usize> {
    if j < shape.hidden().len() {
        mask.kept()[j].clone()
    } else {
        (0..shape.classes()).collect()
    }
}

fn kept_cols(shape: &ModelShape, mask: &NeuronMask, j: usize) -> Vec<usize> {
    if j == 0 {
        (0..shape.input_dim()).collect()
    } else {
        mask.kept()[j - 1].clone()
    }
}

/// Per-coordinate loop: for every global weight and bias, find the clients
/// whose sub-model contains it and average their values by example count,
/// summing in ascending client id.
pub fn brute_force_aggregate(global: &Model, updates: &[CoordinateUpdate]) -> Model {
    let shape = global.shape();
    let mut ups: Vec<&CoordinateUpdate> = updates.iter().collect();
    ups.sort_by_key(|u| u.client_id);
    let mut out = global.clone();
    for j in 0..shape.num_layers() {
        let (n_in, n_out) = (shape.sizes()[j], shape.sizes()[j + 1]);
        for o in 0..n_out {
            for i in 0..=n_in {
                // i == n_in stands for the bias of row o
                let mut covering = Vec::new();
                for u in &ups {
                    let rows = kept_rows(&shape, &u.mask, j);
                    let cols = kept_cols(&shape, &u.mask, j);
                    let Some(r) = rows.iter().position(|&x| x == o) else { continue };
                    let layer = &u.params.0.layers[j];
                    if i == n_in {
                        covering.push((u.n_examples, layer.biases.data()[r]));
                    } else if let Some(c) = cols.iter().position(|&x| x == i) {
                        covering.push((u.n_examples, layer.weights.data()[r * cols.len() + c]));
                    }
                }
                if covering.is_empty() {
                    continue;
                }
                let total = covering.iter().fold(0.0, |a, &(n, _)| a + n as f64);
                let value = covering.iter().fold(0.0, |a, &(n, v)| a + (n as f64 / total) * v);
                if i == n_in {
                    out.layers[j].biases.data_mut()[o] = value;
                } else {
                    out.layers[j].weights.data_mut()[o * n_in + i] = value;
                }
            }
        }
    }
    out
}

/// Exact mean vector and `E‖G_s‖²` of the sparsified estimator by summing
/// over all `2^m` keep/drop outcomes.
pub fn enumerate_estimator(g: &[f64], p: &[f64]) -> (Vec<f64>, f64) {
    let m = g.len();
    assert!(m <= 16);
    let mut mean = vec![0.0; m];
    let mut second = 0.0;
    for bits in 0u32..(1 << m) {
        let mut prob = 1.0;
        let mut sq = 0.0;
        let mut draw = vec![0.0; m];
        for i in 0..m {
            if bits >> i & 1 == 1 {
                prob *= p[i];
                draw[i] = g[i] / p[i];
                sq += draw[i] * draw[i];
            } else {
                prob *= 1.0 - p[i];
            }
        }
        if prob == 0.0 {
            continue;
        }
        for i in 0..m {
            mean[i] += prob * draw[i];
        }
        second += prob * sq;
    }
    (mean, second)
}

/// One plain FedAvg round trace: global model, eval loss, eval accuracy.
pub type FedAvgRound = (Model, f64, f64);

/// Synchronous FedAvg with every client training the full model, using the
/// simulator's seed streams. Shares only `local_train` and `evaluate` with
/// the simulator.
pub fn fedavg_oracle(cfg: &SimConfig) -> Vec<FedAvgRound> {
    let mut clients: Vec<_> = cfg.clients.iter().collect();
    clients.sort_by_key(|c| c.id);
    let mut global = Model::init(&cfg.shape, derive_seed(cfg.seed, &[tag::INIT]));
    let total = clients.iter().fold(0.0, |a, c| a + c.shard.len() as f64);
    let mut trace = Vec::new();
    for round in 1..=cfg.rounds {
        let trained: Vec<Vec<f64>> = clients
            .iter()
            .map(|c| {
                let hp = Hyperparams {
                    learning_rate: cfg.training.learning_rate,
                    batch_size: cfg.training.batch_size,
                    local_epochs: cfg.training.local_epochs,
                    seed: derive_seed(cfg.seed, &[tag::TRAIN, round as u64, c.id as u64]),
                };
                local_train(&global, &c.shard, &hp).unwrap().model.flatten()
            })
            .collect();
        let mut flat = vec![0.0; global.param_count()];
        for (c, w) in clients.iter().zip(&trained) {
            let weight = c.shard.len() as f64 / total;
            for (f, v) in flat.iter_mut().zip(w) {
                *f += weight * v;
            }
        }
        global = unflatten(&global, &flat);
        let (mut loss, mut acc, mut n) = (0.0, 0.0, 0usize);
        for c in &clients {
            let (l, a) = evaluate(&global, &c.eval_shard).unwrap();
            loss += l * c.eval_shard.len() as f64;
            acc += a * c.eval_shard.len() as f64;
            n += c.eval_shard.len();
        }
        trace.push((global.clone(), loss / n as f64, acc / n as f64));
    }
    trace
}

pub fn unflatten(like: &Model, flat: &[f64]) -> Model {
    let mut m = like.clone();
    let mut it = flat.iter();
    for l in &mut m.layers {
        for v in l.weights.data_mut() {
            *v = *it.next().unwrap();
        }
        for v in l.biases.data_mut() {
            *v = *it.next().unwrap();
        }
    }
    assert!(it.next().is_none());
    m
}

/// Parameter count of a dense net with the given layer widths.
pub fn dense_params(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}
