//! Experiment configuration, batch runs, and metrics emission. The `invdrop`
//! binary is a thin argument parser over the `cmd_*` functions here.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, partition, synth_blobs, write_csv, Dataset, PartitionKind, PartitionSpec};
use crate::dropout::DropoutRate;
use crate::error::{Error, Result};
use crate::nn::ModelShape;
use crate::rng::derive_seed;
use crate::sim::{
    ClientProfile, DropoutMethod, LocalTraining, RoundRecord, SimConfig, Simulation, StragglerSelection,
    StrategyParams, Summary,
};
use crate::variance::{check_bound, estimator_variance, keep_probs, mc_second_moment, solve_r};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 12] = [
    "seed",
    "round",
    "method",
    "r",
    "straggler_ids",
    "sim_round_time_s",
    "straggler_time_s",
    "target_time_s",
    "eval_loss",
    "eval_acc",
    "invariant_fraction",
    "thresholds_json",
];

fn default_rounds() -> usize {
    30
}
fn default_method() -> String {
    "invariant".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_slack() -> f64 {
    0.10
}
fn default_warmup() -> u32 {
    crate::dropout::DEFAULT_WARMUP
}
fn default_gamma() -> f64 {
    crate::dropout::DEFAULT_GROWTH
}
fn default_r_min() -> f64 {
    crate::dropout::DEFAULT_R_MIN
}
fn default_lr() -> f64 {
    0.1
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    1
}
fn default_dataset() -> String {
    "synthetic".into()
}
fn default_classes() -> usize {
    4
}
fn default_dim() -> usize {
    8
}
fn default_n_per_class() -> usize {
    100
}
fn default_spread() -> f64 {
    0.4
}
fn default_partition() -> String {
    "iid".into()
}
fn default_alpha() -> f64 {
    0.5
}

/// Flat TOML experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,

    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,

    /// Full-model seconds per round, one entry per client.
    pub client_times: Vec<f64>,
    /// `"none"` disables stragglers; otherwise a positive
    /// `straggler_fraction` selects the slowest fraction and zero selects
    /// the single slowest client.
    #[serde(default)]
    pub stragglers: Option<String>,
    #[serde(default)]
    pub straggler_fraction: f64,
    #[serde(default = "default_slack")]
    pub target_slack: f64,
    /// Forces this rate on every straggler.
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup: u32,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_r_min")]
    pub r_min: f64,

    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,

    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Data and partition seed; derived from the run seed when absent.
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default = "default_partition")]
    pub partition: String,
    #[serde(default = "default_alpha")]
    pub skew_alpha: f64,

    /// Also write the flattened final global gradient per seed.
    #[serde(default)]
    pub capture_gradient: bool,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub method: Option<String>,
    pub rounds: Option<usize>,
    pub rate: Option<f64>,
}

fn field_of_toml_error(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("(document)").to_string()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            Error::config(field_of_toml_error(&msg), msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if o.out_dir.is_some() {
            self.out_dir = o.out_dir.clone();
        }
        if let Some(m) = &o.method {
            self.method = m.clone();
        }
        if let Some(r) = o.rounds {
            self.rounds = r;
        }
        if o.rate.is_some() {
            self.rate = o.rate;
        }
        self.validate()
    }

    pub fn method(&self) -> Result<DropoutMethod> {
        self.method.parse()
    }

    pub fn straggler_selection(&self) -> Result<StragglerSelection> {
        match self.stragglers.as_deref() {
            Some("none") => Ok(StragglerSelection::None),
            None | Some("auto") => {
                if self.straggler_fraction == 0.0 {
                    Ok(StragglerSelection::Slowest)
                } else if self.straggler_fraction > 0.0 && self.straggler_fraction < 1.0 {
                    Ok(StragglerSelection::Fraction(self.straggler_fraction))
                } else {
                    Err(Error::config("straggler_fraction", "must lie in [0, 1)"))
                }
            }
            Some(other) => Err(Error::config("stragglers", format!("unknown value `{other}` (auto|none)"))),
        }
    }

    fn partition_kind(&self) -> Result<PartitionKind> {
        match self.partition.as_str() {
            "iid" => Ok(PartitionKind::Iid),
            "label_skew" => {
                if !(self.skew_alpha > 0.0) || !self.skew_alpha.is_finite() {
                    return Err(Error::config("skew_alpha", "must be positive and finite"));
                }
                Ok(PartitionKind::LabelSkew { alpha: self.skew_alpha })
            }
            other => Err(Error::config("partition", format!("unknown partition `{other}` (iid|label_skew)"))),
        }
    }

    fn strategy(&self) -> Result<StrategyParams> {
        let r_min = DropoutRate::new(self.r_min).map_err(|e| Error::config("r_min", e.to_string()))?;
        Ok(StrategyParams {
            warmup: self.warmup,
            growth: self.gamma,
            r_min,
            target_slack: self.target_slack,
        })
    }

    /// Checks every field without touching the filesystem or running
    /// anything.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        self.method()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        if self.client_times.len() < 2 {
            return Err(Error::config("client_times", "need at least 2 clients"));
        }
        if self.client_times.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::config("client_times", "times must be positive and finite"));
        }
        let selection = self.straggler_selection()?;
        if let StragglerSelection::Fraction(f) = selection {
            let n = self.client_times.len();
            if ((f * n as f64).ceil() as usize) >= n {
                return Err(Error::config("straggler_fraction", "would leave no non-straggler clients"));
            }
        }
        if !(self.target_slack >= 0.0) || !self.target_slack.is_finite() {
            return Err(Error::config("target_slack", "must be finite and non-negative"));
        }
        if let Some(r) = self.rate {
            DropoutRate::new(r).map_err(|e| Error::config("rate", e.to_string()))?;
        }
        self.strategy()?;
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return Err(Error::config("gamma", "must be finite and at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be positive"));
        }
        match self.dataset.as_str() {
            "synthetic" => {
                if self.classes < 2 {
                    return Err(Error::config("classes", "must be at least 2"));
                }
                if self.dim < 2 {
                    return Err(Error::config("dim", "must be at least 2"));
                }
                if self.dim < 63 && self.classes > (1usize << self.dim) {
                    return Err(Error::config("classes", "more classes than hypercube vertices in `dim`"));
                }
                if self.n_per_class == 0 {
                    return Err(Error::config("n_per_class", "must be positive"));
                }
                if !(self.spread >= 0.0) || !self.spread.is_finite() {
                    return Err(Error::config("spread", "must be finite and non-negative"));
                }
                if self.classes * self.n_per_class < 2 * self.client_times.len() {
                    return Err(Error::config("n_per_class", "too few examples for the client count"));
                }
            }
            "csv" => {
                if self.csv_path.is_none() {
                    return Err(Error::config("csv_path", "required when dataset = \"csv\""));
                }
            }
            other => return Err(Error::config("dataset", format!("unknown dataset `{other}` (synthetic|csv)"))),
        }
        self.partition_kind()?;
        Ok(())
    }

    fn data_seed(&self, seed: u64) -> u64 {
        self.data_seed.unwrap_or_else(|| derive_seed(seed, &[crate::rng::tag::DATA]))
    }

    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        match self.dataset.as_str() {
            "csv" => load_csv(self.csv_path.as_ref().expect("validated")),
            _ => synth_blobs(self.data_seed(seed), self.classes, self.dim, self.n_per_class, self.spread),
        }
    }

    /// Materializes the simulator config for one seed.
    pub fn sim_config(&self, seed: u64) -> Result<SimConfig> {
        let ds = self.dataset(seed)?;
        let spec = PartitionSpec {
            kind: self.partition_kind()?,
            client_count: self.client_times.len(),
            seed: self.data_seed(seed),
        };
        let shards = partition(&ds, &spec)?;
        let clients = shards
            .into_iter()
            .zip(&self.client_times)
            .enumerate()
            .map(|(id, (s, &t))| ClientProfile { id, base_time_s: t, shard: s.train, eval_shard: s.eval })
            .collect();
        let shape = ModelShape::from_parts(ds.dim(), &self.hidden, ds.class_count)?;
        let forced_rate = self
            .rate
            .map(DropoutRate::new)
            .transpose()
            .map_err(|e| Error::config("rate", e.to_string()))?;
        let cfg = SimConfig {
            shape,
            clients,
            method: self.method()?,
            rounds: self.rounds,
            stragglers: self.straggler_selection()?,
            strategy: self.strategy()?,
            training: LocalTraining {
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                local_epochs: self.local_epochs,
            },
            seed,
            forced_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One CSV row: a flattened round record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: usize,
    pub method: String,
    pub r: String,
    pub straggler_ids: String,
    pub sim_round_time_s: f64,
    pub straggler_time_s: Option<f64>,
    pub target_time_s: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    pub invariant_fraction: f64,
    pub thresholds_json: String,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

impl MetricsRow {
    pub fn from_record(seed: u64, method: DropoutMethod, rec: &RoundRecord) -> Self {
        Self {
            seed,
            round: rec.round,
            method: method.name().into(),
            r: join(&rec.rates),
            straggler_ids: join(&rec.straggler_ids),
            sim_round_time_s: rec.round_time_s,
            straggler_time_s: rec.straggler_time_s,
            target_time_s: rec.target_time_s,
            eval_loss: rec.eval_loss,
            eval_acc: rec.eval_accuracy,
            invariant_fraction: rec.invariant_fraction,
            thresholds_json: serde_json::to_string(&rec.thresholds).expect("plain floats"),
        }
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(|e| Error::Io(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_accuracy: f64,
    pub best_round: usize,
    pub best_loss: f64,
    pub total_sim_time_s: f64,
    pub straggler_target_ratio: Option<f64>,
    pub final_thresholds: Vec<f64>,
    pub straggler_rates: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub method: String,
    pub rounds: usize,
    pub runs: Vec<SeedSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    pub gradient: Option<Vec<f64>>,
}

/// Runs every seed of a validated config without touching the filesystem
/// (except to read a CSV dataset).
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let mut sim = Simulation::new(cfg.sim_config(seed)?)?;
            let mut records = Vec::with_capacity(cfg.rounds);
            for _ in 0..cfg.rounds {
                records.push(sim.step()?);
            }
            let gradient = if cfg.capture_gradient { Some(sim.global_gradient()?) } else { None };
            let summary = sim.summary(&records)?;
            Ok(SeedRun { seed, records, summary, gradient })
        })
        .collect()
}

/// Output locations written by [`cmd_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub gradients: Vec<PathBuf>,
    pub summary: RunSummary,
}

#[derive(Debug, Serialize, Deserialize)]
struct GradientCapture {
    schema_version: u32,
    seed: u64,
    round: usize,
    gradient: Vec<f64>,
}

/// Loads, validates and runs a config; writes `metrics.csv` and
/// `summary.json` (and `gradient_seed<N>.json` when capturing) under the
/// output directory.
pub fn cmd_run(config_path: impl AsRef<Path>, overrides: &Overrides) -> Result<RunOutput> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    cfg.apply(overrides)?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::config("out_dir", "no output directory (set out_dir or pass --out)"))?;
    let method = cfg.method()?;
    let runs = run_seeds(&cfg)?;
    fs::create_dir_all(&out_dir)?;

    let rows: Vec<MetricsRow> = runs
        .iter()
        .flat_map(|run| run.records.iter().map(move |r| MetricsRow::from_record(run.seed, method, r)))
        .collect();
    let metrics_csv = out_dir.join("metrics.csv");
    write_metrics_csv(&rows, fs::File::create(&metrics_csv)?)?;

    let mut gradients = Vec::new();
    for run in &runs {
        if let Some(g) = &run.gradient {
            let path = out_dir.join(format!("gradient_seed{}.json", run.seed));
            let cap = GradientCapture {
                schema_version: SCHEMA_VERSION,
                seed: run.seed,
                round: run.records.len(),
                gradient: g.clone(),
            };
            fs::write(&path, serde_json::to_string(&cap).expect("serializable"))?;
            gradients.push(path);
        }
    }

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        method: method.name().into(),
        rounds: cfg.rounds,
        runs: runs
            .iter()
            .map(|run| SeedSummary {
                seed: run.seed,
                best_accuracy: run.summary.best_accuracy,
                best_round: run.summary.best_round,
                best_loss: run.summary.best_loss,
                total_sim_time_s: run.summary.total_sim_time_s,
                straggler_target_ratio: run.summary.straggler_target_ratio,
                final_thresholds: run.summary.final_thresholds.clone(),
                straggler_rates: run.records.last().map(|r| r.rates.clone()).unwrap_or_default(),
                warnings: run.summary.warnings.clone(),
            })
            .collect(),
    };
    let summary_json = out_dir.join("summary.json");
    fs::write(&summary_json, serde_json::to_string_pretty(&summary).expect("serializable"))?;
    Ok(RunOutput { metrics_csv, summary_json, gradients, summary })
}

/// Where `analyze-variance` reads its gradient vector from.
#[derive(Debug, Clone, PartialEq)]
pub enum VectorSource {
    Inline(Vec<f64>),
    /// A JSON array, a JSON object with a `gradient` array (as written by
    /// `run` with `capture_gradient`), or comma/whitespace separated numbers.
    File(PathBuf),
}

pub fn parse_number_list(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Input(format!("`{s}` is not a number"))))
        .collect()
}

impl VectorSource {
    pub fn read(&self) -> Result<Vec<f64>> {
        match self {
            Self::Inline(v) => Ok(v.clone()),
            Self::File(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                match serde_json::from_str::<serde_json::Value>(&text) {
                    Ok(serde_json::Value::Array(_)) => serde_json::from_str(&text)
                        .map_err(|e| Error::Input(format!("{}: {e}", path.display()))),
                    Ok(serde_json::Value::Object(map)) => {
                        let g = map
                            .get("gradient")
                            .ok_or_else(|| Error::Input(format!("{}: no `gradient` field", path.display())))?;
                        serde_json::from_value(g.clone()).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
                    }
                    _ => parse_number_list(&text),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepProbSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub samples: usize,
    pub seed: u64,
    pub second_moment: f64,
    /// `|MC − exact| / exact`
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub schema_version: u32,
    pub m: usize,
    pub k: usize,
    pub epsilon: f64,
    pub r: f64,
    pub constraint_satisfied: bool,
    pub constraint_violations: usize,
    pub keep_probs: KeepProbSummary,
    pub dense_second_moment: f64,
    pub estimator_variance: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub monte_carlo: Option<McReport>,
    pub bound_holds: bool,
    pub bound_lhs: f64,
    pub bound_rhs: f64,
    pub bound_slack: f64,
}

/// Full keep-ratio / variance / bound analysis of one gradient vector.
pub fn analyze_variance(g: &[f64], k: usize, epsilon: f64, mc_samples: usize, seed: u64) -> Result<VarianceReport> {
    let ratio = solve_r(g, k, epsilon)?;
    let bound = check_bound(g, k, epsilon)?;
    let p = if ratio.r > 0.0 { keep_probs(g, k, ratio.r)? } else { vec![1.0; g.len()] };
    let variance = estimator_variance(g, &p)?;
    let monte_carlo = if mc_samples > 0 {
        let mc = mc_second_moment(g, &p, mc_samples, seed)?;
        Some(McReport {
            samples: mc_samples,
            seed,
            second_moment: mc,
            relative_error: if variance > 0.0 { (mc - variance).abs() / variance } else { 0.0 },
        })
    } else {
        None
    };
    let sum: f64 = p.iter().sum();
    Ok(VarianceReport {
        schema_version: SCHEMA_VERSION,
        m: g.len(),
        k,
        epsilon,
        r: ratio.r,
        constraint_satisfied: ratio.constraint_satisfied(),
        constraint_violations: ratio.violations.len(),
        keep_probs: KeepProbSummary {
            min: p.iter().copied().fold(f64::INFINITY, f64::min),
            max: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: sum / p.len() as f64,
            sum,
        },
        dense_second_moment: g.iter().map(|v| v * v).sum(),
        estimator_variance: variance,
        monte_carlo,
        bound_holds: bound.holds,
        bound_lhs: bound.lhs,
        bound_rhs: bound.rhs,
        bound_slack: bound.slack(),
    })
}

/// Runs [`analyze_variance`] and writes the JSON report to `out` (stdout
/// when `None`).
pub fn cmd_analyze_variance(
    source: &VectorSource,
    k: usize,
    epsilon: f64,
    mc_samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<VarianceReport> {
    let g = source.read()?;
    let report = analyze_variance(&g, k, epsilon, mc_samples, seed)?;
    let json = serde_json::to_string_pretty(&report).expect("serializable");
    match out {
        Some(path) => fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
}

/// Generates Gaussian blobs and writes them in the CSV format read by
/// [`load_csv`].
pub fn cmd_gen_data(params: &SynthParams, out_path: impl AsRef<Path>) -> Result<Dataset> {
    let ds = synth_blobs(params.seed, params.classes, params.dim, params.n_per_class, params.spread)?;
    let path = out_path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    write_csv(&ds, &mut w)?;
    std::io::Write::flush(&mut w)?;
    Ok(ds)
}

/// Process exit status for a command result: 0 ok, 2 invalid config, 1
/// anything else.
pub fn exit_code<T>(result: &Result<T>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(Error::Config { .. }) => 2,
        Err(_) => 1,
    }
}
