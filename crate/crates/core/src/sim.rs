//! Synchronous FedAvg coordinator over simulated heterogeneous clients.
//!
//! Round 1 trains the full model everywhere and profiles client times. The
//! slowest client(s) become stragglers, `T_target` is the slowest
//! non-straggler's time, and every straggler gets its own dropout rate which
//! stays fixed for the rest of the run. From round 2 on stragglers train a
//! sub-model built by the configured method; non-stragglers always train the
//! full model and are the only source of invariance statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dropout::{
    collect_update_stats, invariant_fraction, invariant_mask, ordered_mask, random_mask, update_thresholds,
    DropoutRate, ThresholdState, UpdateStats, DEFAULT_GROWTH, DEFAULT_R_MIN, DEFAULT_WARMUP,
};
use crate::error::{Error, Result};
use crate::nn::{evaluate, local_train, loss_and_grads, DataBatch, Hyperparams, Model, ModelShape};
use crate::rng::{derive_seed, tag};
use crate::submodel::{aggregate, cost_fraction, extract_submodel, CoordinateUpdate, NeuronMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMethod {
    None,
    Random,
    Ordered,
    Invariant,
}

impl DropoutMethod {
    pub const ALL: [DropoutMethod; 4] = [Self::None, Self::Random, Self::Ordered, Self::Invariant];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Random => "random",
            Self::Ordered => "ordered",
            Self::Invariant => "invariant",
        }
    }
}

impl std::str::FromStr for DropoutMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}` (none|random|ordered|invariant)")))
    }
}

/// Which clients count as stragglers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StragglerSelection {
    /// Nobody; every method degenerates to plain FedAvg.
    None,
    /// The single slowest client; `T_target` is the second-slowest time.
    Slowest,
    /// The slowest `ceil(f·N)` clients.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    pub warmup: u32,
    pub growth: f64,
    pub r_min: DropoutRate,
    pub target_slack: f64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            warmup: DEFAULT_WARMUP,
            growth: DEFAULT_GROWTH,
            r_min: DropoutRate::new(DEFAULT_R_MIN).expect("on grid"),
            target_slack: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientProfile {
    pub id: usize,
    /// Simulated seconds per round on the full model.
    pub base_time_s: f64,
    pub shard: DataBatch,
    pub eval_shard: DataBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub shape: ModelShape,
    pub clients: Vec<ClientProfile>,
    pub method: DropoutMethod,
    pub rounds: usize,
    pub stragglers: StragglerSelection,
    pub strategy: StrategyParams,
    pub training: LocalTraining,
    pub seed: u64,
    /// Skip rate selection and give every straggler this rate.
    pub forced_rate: Option<DropoutRate>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.clients.len() < 2 {
            return Err(Error::config("clients", "need at least 2 clients"));
        }
        let mut ids: Vec<usize> = self.clients.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("clients", "client ids must be unique"));
        }
        for c in &self.clients {
            if !(c.base_time_s > 0.0) || !c.base_time_s.is_finite() {
                return Err(Error::config("client_times", format!("client {} time must be positive", c.id)));
            }
            if c.shard.is_empty() || c.eval_shard.is_empty() {
                return Err(Error::config("clients", format!("client {} has an empty shard", c.id)));
            }
            if c.shard.dim() != self.shape.input_dim() || c.eval_shard.dim() != self.shape.input_dim() {
                return Err(Error::config("hidden", format!("client {} feature width differs from the model input", c.id)));
            }
            let classes = self.shape.classes();
            if c.shard.labels.iter().chain(&c.eval_shard.labels).any(|&l| l >= classes) {
                return Err(Error::config("classes", format!("client {} has labels beyond {classes} classes", c.id)));
            }
        }
        if let StragglerSelection::Fraction(f) = self.stragglers {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config("straggler_fraction", "must lie in (0, 1)"));
            }
            if straggler_count(self.clients.len(), self.stragglers) >= self.clients.len() {
                return Err(Error::config("straggler_fraction", "would leave no non-straggler clients"));
            }
        }
        let s = &self.strategy;
        if !(s.target_slack >= 0.0) || !s.target_slack.is_finite() {
            return Err(Error::config("target_slack", "must be finite and non-negative"));
        }
        if !(s.growth >= 1.0) || !s.growth.is_finite() {
            return Err(Error::config("gamma", "must be finite and at least 1"));
        }
        if s.r_min.drop_counts(&self.shape).is_err() {
            return Err(Error::config("r_min", "would empty a hidden layer"));
        }
        if let Some(r) = self.forced_rate {
            if r.drop_counts(&self.shape).is_err() {
                return Err(Error::config("rate", "would empty a hidden layer"));
            }
        }
        let hp = Hyperparams {
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            local_epochs: self.training.local_epochs,
            seed: 0,
        };
        hp.validate().map_err(|e| Error::config("learning_rate", e.to_string()))
    }
}

fn straggler_count(n: usize, sel: StragglerSelection) -> usize {
    match sel {
        StragglerSelection::None => 0,
        StragglerSelection::Slowest => 1,
        StragglerSelection::Fraction(f) => ((f * n as f64).ceil() as usize).max(1),
    }
}

/// Outcome of round-1 profiling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StragglerProfile {
    /// Slowest first.
    pub straggler_ids: Vec<usize>,
    pub target_time_s: f64,
}

/// Ranks `(client id, time)` pairs slowest first (ties: lower id first) and
/// splits off the stragglers. `T_target` is the slowest remaining time.
pub fn profile_stragglers(times: &[(usize, f64)], selection: StragglerSelection) -> Result<StragglerProfile> {
    if times.len() < 2 {
        return Err(Error::config("clients", "straggler profiling needs at least 2 clients"));
    }
    let count = straggler_count(times.len(), selection);
    if count >= times.len() {
        return Err(Error::config("straggler_fraction", "would leave no non-straggler clients"));
    }
    let mut ranked = times.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(StragglerProfile {
        straggler_ids: ranked[..count].iter().map(|&(id, _)| id).collect(),
        target_time_s: ranked[count].1,
    })
}

/// `T_straggler / T_target`.
pub fn required_speedup(t_straggler: f64, t_target: f64) -> Result<f64> {
    if !(t_straggler > 0.0) || !(t_target > 0.0) {
        return Err(Error::Input(format!(
            "times must be positive (straggler {t_straggler}, target {t_target})"
        )));
    }
    Ok(t_straggler / t_target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateChoice {
    pub rate: DropoutRate,
    /// False when even `r_min` misses `T_target·(1+slack)`.
    pub met_target: bool,
}

/// Largest grid rate whose prefix-mask cost brings `base_time_s` within
/// `T_target·(1+slack)`; `r_min` as a best effort otherwise.
pub fn choose_rate(base_time_s: f64, target_time_s: f64, shape: &ModelShape, strategy: &StrategyParams) -> Result<RateChoice> {
    let budget = target_time_s * (1.0 + strategy.target_slack);
    for steps in (strategy.r_min.steps()..=DropoutRate::FULL.steps()).rev() {
        let rate = DropoutRate::from_steps(steps)?;
        let Ok(mask) = ordered_mask(shape, rate) else {
            continue;
        };
        if base_time_s * cost_fraction(shape, &mask)? <= budget {
            return Ok(RateChoice { rate, met_target: true });
        }
    }
    Ok(RateChoice { rate: strategy.r_min, met_target: false })
}

/// Linear cost model: full-model time scaled by the active parameter share.
pub fn simulate_time(base_time_s: f64, mask: &NeuronMask, shape: &ModelShape) -> Result<f64> {
    Ok(base_time_s * cost_fraction(shape, mask)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `(client id, simulated seconds)` in client order.
    pub client_times: Vec<(usize, f64)>,
    pub straggler_ids: Vec<usize>,
    /// Rate used by each straggler, aligned with `straggler_ids`.
    pub rates: Vec<f64>,
    /// Synchronous barrier: the slowest client this round.
    pub round_time_s: f64,
    /// Slowest straggler this round; `None` without stragglers.
    pub straggler_time_s: Option<f64>,
    pub target_time_s: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub invariant_fraction: f64,
    /// Thresholds in effect this round.
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_round: usize,
    pub best_accuracy: f64,
    pub best_loss: f64,
    pub total_sim_time_s: f64,
    /// Final-round straggler time over `T_target`.
    pub straggler_target_ratio: Option<f64>,
    pub final_thresholds: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    pub final_model: Model,
}

/// Accuracy at the round with the lowest loss; ties go to the earliest.
pub fn best_round(records: &[RoundRecord]) -> Option<&RoundRecord> {
    records
        .iter()
        .reduce(|best, r| if r.eval_loss < best.eval_loss { r } else { best })
}

/// Round-by-round driver.
pub struct Simulation {
    config: SimConfig,
    global: Model,
    round: usize,
    profile: Option<StragglerProfile>,
    rates: Vec<DropoutRate>,
    thresholds: Option<ThresholdState>,
    last_stats: Option<UpdateStats>,
    warnings: Vec<String>,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let global = Model::init(&config.shape, derive_seed(config.seed, &[tag::INIT]));
        Ok(Self {
            config,
            global,
            round: 0,
            profile: None,
            rates: Vec::new(),
            thresholds: None,
            last_stats: None,
            warnings: Vec::new(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn global(&self) -> &Model {
        &self.global
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn profile(&self) -> Option<&StragglerProfile> {
        self.profile.as_ref()
    }

    /// Per-straggler rates, aligned with the profile's straggler ids.
    pub fn rates(&self) -> &[DropoutRate] {
        &self.rates
    }

    pub fn threshold_state(&self) -> Option<&ThresholdState> {
        self.thresholds.as_ref()
    }

    /// Invariance statistics gathered in the most recent round.
    pub fn last_stats(&self) -> Option<&UpdateStats> {
        self.last_stats.as_ref()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn rate_of(&self, client: usize) -> Option<DropoutRate> {
        let p = self.profile.as_ref()?;
        p.straggler_ids.iter().position(|&id| id == client).map(|i| self.rates[i])
    }

    fn mask_for(&self, client: usize) -> Result<NeuronMask> {
        let shape = &self.config.shape;
        let full = NeuronMask::full(shape);
        let Some(rate) = self.rate_of(client) else {
            return Ok(full);
        };
        if rate.is_full() {
            return Ok(full);
        }
        match self.config.method {
            DropoutMethod::None => Ok(full),
            DropoutMethod::Ordered => ordered_mask(shape, rate),
            DropoutMethod::Random => random_mask(
                shape,
                rate,
                derive_seed(self.config.seed, &[tag::RANDOM_MASK, self.round as u64 + 1, client as u64]),
            ),
            DropoutMethod::Invariant => match (&self.thresholds, &self.last_stats) {
                (Some(state), Some(stats)) => invariant_mask(state, stats, shape, rate),
                _ => Ok(full),
            },
        }
    }

    fn choose_rates(&mut self, profile: &StragglerProfile) -> Result<()> {
        self.rates.clear();
        for &id in &profile.straggler_ids {
            let rate = if self.config.method == DropoutMethod::None {
                DropoutRate::FULL
            } else if let Some(r) = self.config.forced_rate {
                r
            } else {
                let base = self.config.clients.iter().find(|c| c.id == id).expect("profiled").base_time_s;
                let choice = choose_rate(base, profile.target_time_s, &self.config.shape, &self.config.strategy)?;
                if !choice.met_target {
                    self.warnings.push(format!(
                        "client {id}: r_min = {} cannot reach the target time {:.3}s",
                        choice.rate, profile.target_time_s
                    ));
                }
                choice.rate
            };
            self.rates.push(rate);
        }
        Ok(())
    }

    /// Runs one synchronous round and returns its record.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let cfg = &self.config;
        let shape = &cfg.shape;
        let round = self.round + 1;

        let masks = cfg
            .clients
            .iter()
            .map(|c| self.mask_for(c.id))
            .collect::<Result<Vec<_>>>()?;

        let trained = cfg
            .clients
            .par_iter()
            .zip(masks.par_iter())
            .map(|(c, mask)| {
                let hp = Hyperparams {
                    learning_rate: cfg.training.learning_rate,
                    batch_size: cfg.training.batch_size,
                    local_epochs: cfg.training.local_epochs,
                    seed: derive_seed(cfg.seed, &[tag::TRAIN, round as u64, c.id as u64]),
                };
                let start = extract_submodel(&self.global, mask)?;
                let out = local_train(start.model(), &c.shard, &hp)?;
                Ok(CoordinateUpdate {
                    client_id: c.id,
                    mask: mask.clone(),
                    params: crate::submodel::SubModel(out.model),
                    n_examples: out.n_examples,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let client_times = cfg
            .clients
            .iter()
            .zip(&masks)
            .map(|(c, m)| Ok((c.id, simulate_time(c.base_time_s, m, shape)?)))
            .collect::<Result<Vec<_>>>()?;

        if self.profile.is_none() {
            let profile = profile_stragglers(&client_times, cfg.stragglers)?;
            self.choose_rates(&profile)?;
            self.profile = Some(profile);
        }
        let profile = self.profile.clone().expect("set above");
        let cfg = &self.config;
        let shape = &cfg.shape;

        let full_models: Vec<(usize, Model)> = trained
            .iter()
            .filter(|u| !profile.straggler_ids.contains(&u.client_id))
            .map(|u| (u.client_id, u.params.0.clone()))
            .collect();
        let stats = collect_update_stats(&self.global, &full_models)?;
        let state = match self.thresholds.take() {
            Some(s) => s,
            None => ThresholdState::from_first_round(&stats, cfg.strategy.warmup, cfg.strategy.growth)?,
        };
        let fraction = invariant_fraction(&stats, &state.thresholds)?;
        let thresholds_used = state.thresholds.clone();
        let needed = needed_drops(shape, &self.rates)?;
        let next_state = update_thresholds(&state, &stats, &needed)?;

        let global = aggregate(&self.global, &trained)?;

        let (mut loss_sum, mut acc_sum, mut n_sum) = (0.0, 0.0, 0usize);
        for c in &cfg.clients {
            let (loss, acc) = evaluate(&global, &c.eval_shard)?;
            let n = c.eval_shard.len();
            loss_sum += loss * n as f64;
            acc_sum += acc * n as f64;
            n_sum += n;
        }

        let straggler_time_s = profile
            .straggler_ids
            .iter()
            .filter_map(|id| client_times.iter().find(|(c, _)| c == id).map(|&(_, t)| t))
            .reduce(f64::max);
        let record = RoundRecord {
            round,
            round_time_s: client_times.iter().map(|&(_, t)| t).fold(0.0, f64::max),
            client_times,
            straggler_ids: profile.straggler_ids.clone(),
            rates: self.rates.iter().map(|r| r.value()).collect(),
            straggler_time_s,
            target_time_s: profile.target_time_s,
            eval_loss: loss_sum / n_sum as f64,
            eval_accuracy: acc_sum / n_sum as f64,
            invariant_fraction: fraction,
            thresholds: thresholds_used,
        };

        self.global = global;
        self.thresholds = Some(next_state);
        self.last_stats = Some(stats);
        self.round = round;
        Ok(record)
    }

    /// Runs all configured rounds.
    pub fn run(mut self) -> Result<ExperimentResult> {
        let mut records = Vec::with_capacity(self.config.rounds);
        for _ in 0..self.config.rounds {
            records.push(self.step()?);
        }
        let summary = self.summary(&records)?;
        Ok(ExperimentResult {
            records,
            summary,
            final_model: self.global,
        })
    }

    /// Example-weighted mean gradient of the current global model over the
    /// clients' training shards, flattened. Clients report gradients only.
    pub fn global_gradient(&self) -> Result<Vec<f64>> {
        let per_client = self
            .config
            .clients
            .par_iter()
            .map(|c| Ok((c.shard.len(), loss_and_grads(&self.global, &c.shard)?.1.flatten())))
            .collect::<Result<Vec<_>>>()?;
        let total: usize = per_client.iter().map(|(n, _)| n).sum();
        let mut out = vec![0.0; self.global.param_count()];
        for (n, g) in per_client {
            let w = n as f64 / total as f64;
            for (o, v) in out.iter_mut().zip(g) {
                *o += w * v;
            }
        }
        Ok(out)
    }
}

/// Drops the invariant-threshold controller must cover per layer: the
/// largest drop count among the stragglers' rates.
fn needed_drops(shape: &ModelShape, rates: &[DropoutRate]) -> Result<Vec<usize>> {
    let mut needed = vec![0; shape.hidden().len()];
    for r in rates {
        for (n, d) in needed.iter_mut().zip(r.drop_counts(shape)?) {
            *n = (*n).max(d);
        }
    }
    Ok(needed)
}

impl Simulation {
    /// Summary of a run whose records came from this simulation.
    pub fn summary(&self, records: &[RoundRecord]) -> Result<Summary> {
        summarize(records, self)
    }
}

fn summarize(records: &[RoundRecord], sim: &Simulation) -> Result<Summary> {
    let best = best_round(records).ok_or_else(|| Error::Input("no rounds were run".into()))?;
    let last = records.last().expect("non-empty");
    Ok(Summary {
        best_round: best.round,
        best_accuracy: best.eval_accuracy,
        best_loss: best.eval_loss,
        total_sim_time_s: records.iter().map(|r| r.round_time_s).sum(),
        straggler_target_ratio: last.straggler_time_s.map(|t| t / last.target_time_s),
        final_thresholds: sim.thresholds.as_ref().map(|s| s.thresholds.clone()).unwrap_or_default(),
        warnings: sim.warnings.clone(),
    })
}

pub fn run_experiment(config: SimConfig) -> Result<ExperimentResult> {
    Simulation::new(config)?.run()
}
