//! Mask-generation policies for stragglers: random, ordered (prefix) and
//! invariant dropout, plus the per-layer drop-threshold controller that
//! drives invariant dropout.
//!
//! Invariance is judged from the full-model updates of non-straggler
//! clients. For every hidden neuron we measure the relative L2 change of its
//! parameter set (weight row plus bias) against the previous global model.
//! A neuron is *majority-invariant* when a strict majority of contributing
//! clients moved it by no more than the layer threshold. Thresholds start at
//! the mean per-client layer minimum, stay put during a warmup, then grow
//! geometrically until each layer has enough invariant neurons to cover the
//! straggler's drop count.

use std::cmp::Ordering;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, ModelShape};
use crate::rng::rng_from;
use crate::submodel::NeuronMask;

/// Guards the percent-change denominator for previously-zero neurons.
pub const PERCENT_EPS: f64 = 1e-12;
/// Rates are multiples of 1/RATE_STEPS.
pub const RATE_STEPS: u32 = 20;
pub const DEFAULT_R_MIN: f64 = 0.5;
pub const DEFAULT_GROWTH: f64 = 1.1;
pub const DEFAULT_WARMUP: u32 = 5;

/// Fraction of each hidden layer kept in a sub-model, on a 0.05 grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DropoutRate(u32);

impl DropoutRate {
    pub const FULL: DropoutRate = DropoutRate(RATE_STEPS);

    /// Accepts values within 1e-9 of a multiple of 0.05 in `[0.05, 1.0]`.
    pub fn new(r: f64) -> Result<Self> {
        let scaled = r * RATE_STEPS as f64;
        let steps = scaled.round();
        if !r.is_finite() || (scaled - steps).abs() > 1e-9 {
            return Err(Error::Rate(format!("{r} is not a multiple of 0.05")));
        }
        if steps < 1.0 || steps > RATE_STEPS as f64 {
            return Err(Error::Rate(format!("{r} outside [0.05, 1.0]")));
        }
        Ok(Self(steps as u32))
    }

    pub fn from_steps(steps: u32) -> Result<Self> {
        if steps == 0 || steps > RATE_STEPS {
            return Err(Error::Rate(format!("{steps}/20 outside [0.05, 1.0]")));
        }
        Ok(Self(steps))
    }

    pub fn steps(self) -> u32 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / RATE_STEPS as f64
    }

    pub fn is_full(self) -> bool {
        self.0 == RATE_STEPS
    }

    /// `floor((1 - r) * width)`, in exact integer arithmetic.
    pub fn drop_count(self, width: usize) -> usize {
        (RATE_STEPS - self.0) as usize * width / RATE_STEPS as usize
    }

    /// Per-layer drop counts; errors if any layer would be emptied.
    pub fn drop_counts(self, shape: &ModelShape) -> Result<Vec<usize>> {
        shape
            .hidden()
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let d = self.drop_count(k);
                if d >= k {
                    Err(Error::Rate(format!(
                        "rate {} would drop all {k} neurons of hidden layer {j}",
                        self.value()
                    )))
                } else {
                    Ok(d)
                }
            })
            .collect()
    }
}

impl TryFrom<f64> for DropoutRate {
    type Error = Error;
    fn try_from(r: f64) -> Result<Self> {
        Self::new(r)
    }
}

impl From<DropoutRate> for f64 {
    fn from(r: DropoutRate) -> f64 {
        r.value()
    }
}

impl std::fmt::Display for DropoutRate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}", self.value())
    }
}

/// Relative L2 change `‖new − prev‖ / max(‖prev‖, ε)` of one neuron's
/// parameter set.
pub fn percent_change(prev: &[f64], new: &[f64]) -> Result<f64> {
    if prev.len() != new.len() {
        return Err(Error::Input(format!(
            "neuron parameter sets differ in length: {} vs {}",
            prev.len(),
            new.len()
        )));
    }
    let diff = prev
        .iter()
        .zip(new)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    let norm = prev.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(diff / norm.max(PERCENT_EPS))
}

/// Percent changes of one client, `layers[j][i]` for hidden neuron `i` of
/// hidden layer `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientStats {
    pub client_id: usize,
    pub layers: Vec<Vec<f64>>,
}

/// Per-(client, layer, neuron) percent changes from non-straggler clients.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub clients: Vec<ClientStats>,
}

impl UpdateStats {
    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    fn layer_widths(&self) -> Vec<usize> {
        self.clients
            .first()
            .map(|c| c.layers.iter().map(Vec::len).collect())
            .unwrap_or_default()
    }

    fn check(&self) -> Result<Vec<usize>> {
        let widths = self.layer_widths();
        if self.clients.is_empty() {
            return Err(Error::Input("update stats have no contributing clients".into()));
        }
        for c in &self.clients {
            if c.layers.iter().map(Vec::len).collect::<Vec<_>>() != widths {
                return Err(Error::Input(format!(
                    "client {} stats do not match the other clients' layer widths",
                    c.client_id
                )));
            }
        }
        Ok(widths)
    }

    /// Mean percent change across clients, per layer and neuron.
    pub fn mean_changes(&self) -> Vec<Vec<f64>> {
        let n = self.clients.len() as f64;
        let mut out: Vec<Vec<f64>> = self.layer_widths().iter().map(|&k| vec![0.0; k]).collect();
        for c in &self.clients {
            for (acc, layer) in out.iter_mut().zip(&c.layers) {
                for (a, v) in acc.iter_mut().zip(layer) {
                    *a += v;
                }
            }
        }
        out.iter_mut().flatten().for_each(|v| *v /= n);
        out
    }
}

/// Percent change of every hidden neuron of every full-model client against
/// the same previous global model.
pub fn collect_update_stats(prev_global: &Model, full_client_models: &[(usize, Model)]) -> Result<UpdateStats> {
    let shape = prev_global.shape();
    let hidden = shape.hidden().len();
    let mut clients = Vec::with_capacity(full_client_models.len());
    for (id, model) in full_client_models {
        if model.shape() != shape {
            return Err(Error::Input(format!(
                "client {id} model shape {:?} differs from global {:?}",
                model.shape().sizes(),
                shape.sizes()
            )));
        }
        let layers = (0..hidden)
            .map(|j| {
                let (p, c) = (&prev_global.layers[j], &model.layers[j]);
                (0..p.out_units())
                    .map(|i| percent_change(&p.neuron_params(i), &c.neuron_params(i)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        clients.push(ClientStats { client_id: *id, layers });
    }
    Ok(UpdateStats { clients })
}

/// `flags[j][i]` is true iff strictly more than half of the clients have a
/// change at or below `thresholds[j]` for neuron `i`.
pub fn majority_invariant(stats: &UpdateStats, thresholds: &[f64]) -> Result<Vec<Vec<bool>>> {
    let widths = stats.check()?;
    if thresholds.len() != widths.len() {
        return Err(Error::Input(format!(
            "{} thresholds for {} hidden layers",
            thresholds.len(),
            widths.len()
        )));
    }
    let n = stats.clients.len();
    Ok(widths
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            (0..k)
                .map(|i| {
                    let below = stats
                        .clients
                        .iter()
                        .filter(|c| c.layers[j][i] <= thresholds[j])
                        .count();
                    2 * below > n
                })
                .collect()
        })
        .collect())
}

/// Initial per-layer thresholds: the mean over clients of each client's
/// minimum change in the layer.
pub fn init_thresholds(first_iter_stats: &UpdateStats) -> Result<Vec<f64>> {
    let widths = first_iter_stats.check()?;
    let n = first_iter_stats.clients.len() as f64;
    Ok((0..widths.len())
        .map(|j| {
            first_iter_stats
                .clients
                .iter()
                .map(|c| c.layers[j].iter().copied().fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / n
        })
        .collect())
}

/// Fraction of all hidden neurons that are majority-invariant at `thresholds`.
pub fn invariant_fraction(stats: &UpdateStats, thresholds: &[f64]) -> Result<f64> {
    let flags = majority_invariant(stats, thresholds)?;
    let total: usize = flags.iter().map(Vec::len).sum();
    let flagged = flags.iter().flatten().filter(|&&f| f).count();
    Ok(flagged as f64 / total as f64)
}

/// Drop-threshold controller state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub thresholds: Vec<f64>,
    pub warmup_remaining: u32,
    /// Consecutive majority-invariant rounds per hidden neuron.
    pub streaks: Vec<Vec<u32>>,
    pub growth: f64,
}

impl ThresholdState {
    pub fn new(thresholds: Vec<f64>, hidden: &[usize], warmup: u32, growth: f64) -> Result<Self> {
        if thresholds.len() != hidden.len() {
            return Err(Error::Input(format!(
                "{} thresholds for {} hidden layers",
                thresholds.len(),
                hidden.len()
            )));
        }
        if thresholds.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::Input("thresholds must be finite and non-negative".into()));
        }
        if !(growth >= 1.0) || !growth.is_finite() {
            return Err(Error::Input(format!("growth factor {growth} must be finite and >= 1")));
        }
        Ok(Self {
            thresholds,
            warmup_remaining: warmup,
            streaks: hidden.iter().map(|&k| vec![0; k]).collect(),
            growth,
        })
    }

    /// Thresholds from first-round stats.
    pub fn from_first_round(stats: &UpdateStats, warmup: u32, growth: f64) -> Result<Self> {
        let thresholds = init_thresholds(stats)?;
        let widths = stats.layer_widths();
        Self::new(thresholds, &widths, warmup, growth)
    }
}

/// One controller step. Streaks follow the majority flags at the current
/// thresholds. Outside warmup, every layer whose invariant count is below
/// `needed_per_layer[j]` has its threshold multiplied by the growth factor.
pub fn update_thresholds(
    state: &ThresholdState,
    stats: &UpdateStats,
    needed_per_layer: &[usize],
) -> Result<ThresholdState> {
    let flags = majority_invariant(stats, &state.thresholds)?;
    if needed_per_layer.len() != flags.len() {
        return Err(Error::Input(format!(
            "{} needed counts for {} hidden layers",
            needed_per_layer.len(),
            flags.len()
        )));
    }
    if flags.iter().map(Vec::len).ne(state.streaks.iter().map(Vec::len)) {
        return Err(Error::Input("stats widths differ from controller state".into()));
    }
    let mut next = state.clone();
    for (streaks, layer_flags) in next.streaks.iter_mut().zip(&flags) {
        for (s, &f) in streaks.iter_mut().zip(layer_flags) {
            *s = if f { s.saturating_add(1) } else { 0 };
        }
    }
    if next.warmup_remaining > 0 {
        next.warmup_remaining -= 1;
        return Ok(next);
    }
    for ((d, layer_flags), &needed) in next.thresholds.iter_mut().zip(&flags).zip(needed_per_layer) {
        let count = layer_flags.iter().filter(|&&f| f).count();
        if count < needed {
            *d *= next.growth;
        }
    }
    Ok(next)
}

fn complement(width: usize, dropped: &[usize]) -> Vec<usize> {
    let mut is_dropped = vec![false; width];
    for &i in dropped {
        is_dropped[i] = true;
    }
    (0..width).filter(|&i| !is_dropped[i]).collect()
}

/// Drops `floor((1−r)·K_j)` neurons per hidden layer, most-invariant first:
/// majority-invariant neurons by streak (desc), mean change (asc), index
/// (asc); then the remaining neurons by mean change (asc), index (asc).
pub fn invariant_mask(
    state: &ThresholdState,
    stats: &UpdateStats,
    shape: &ModelShape,
    rate: DropoutRate,
) -> Result<NeuronMask> {
    let drops = rate.drop_counts(shape)?;
    let flags = majority_invariant(stats, &state.thresholds)?;
    let means = stats.mean_changes();
    if flags.iter().map(Vec::len).ne(shape.hidden().iter().copied()) {
        return Err(Error::Input("stats do not cover the model's hidden layers".into()));
    }
    let kept = shape
        .hidden()
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let mut order: Vec<usize> = (0..k).collect();
            let (streak, mean, flag) = (&state.streaks[j], &means[j], &flags[j]);
            order.sort_by(|&a, &b| {
                flag[b]
                    .cmp(&flag[a])
                    .then_with(|| {
                        if flag[a] && flag[b] {
                            streak[b].cmp(&streak[a])
                        } else {
                            Ordering::Equal
                        }
                    })
                    .then_with(|| mean[a].total_cmp(&mean[b]))
                    .then_with(|| a.cmp(&b))
            });
            complement(k, &order[..drops[j]])
        })
        .collect();
    NeuronMask::new(kept)
}

/// Keeps a uniformly random subset of `K_j − floor((1−r)·K_j)` neurons per
/// hidden layer.
pub fn random_mask(shape: &ModelShape, rate: DropoutRate, seed: u64) -> Result<NeuronMask> {
    let drops = rate.drop_counts(shape)?;
    let mut rng = rng_from(seed);
    let kept = shape
        .hidden()
        .iter()
        .zip(drops)
        .map(|(&k, d)| {
            let mut idx = sample(&mut rng, k, k - d).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    NeuronMask::new(kept)
}

/// Keeps the prefix `0..ceil(r·K_j)` of every hidden layer.
pub fn ordered_mask(shape: &ModelShape, rate: DropoutRate) -> Result<NeuronMask> {
    let drops = rate.drop_counts(shape)?;
    let kept = shape
        .hidden()
        .iter()
        .zip(drops)
        .map(|(&k, d)| (0..k - d).collect())
        .collect();
    NeuronMask::new(kept)
}
