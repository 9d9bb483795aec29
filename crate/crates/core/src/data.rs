//! Datasets: seeded Gaussian blobs, CSV ingestion, and IID or Dirichlet
//! label-skew partitioning across clients.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DataBatch;
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

/// Share of every client's allocation held out for evaluation.
pub const EVAL_FRACTION_DENOM: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Dimension("features must be [n, dim] with one label per row".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Input(format!("label {bad} out of range for {class_count} classes")));
        }
        if labels.len() < class_count {
            return Err(Error::Input(format!(
                "{} examples is fewer than {class_count} classes",
                labels.len()
            )));
        }
        Ok(Self { features, labels, class_count })
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

    pub fn batch(&self, rows: &[usize]) -> Result<DataBatch> {
        DataBatch::new(
            self.features.select_rows(rows)?,
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Gaussian clusters, one per class. Class means are distinct vertices of
/// the unit hypercube `{0,1}^dim`, so any two means are at least 1 apart.
pub fn synth_blobs(seed: u64, classes: usize, dim: usize, n_per_class: usize, spread: f64) -> Result<Dataset> {
    if classes < 2 || dim < 2 || n_per_class == 0 {
        return Err(Error::Input(format!(
            "need classes >= 2, dim >= 2, n_per_class >= 1 (got {classes}, {dim}, {n_per_class})"
        )));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::Input(format!("spread {spread} must be finite and non-negative")));
    }
    if dim < 63 && classes > (1usize << dim) {
        return Err(Error::Input(format!("{classes} classes do not fit on a {dim}-cube")));
    }
    let mut rng = rng_from(derive_seed(seed, &[crate::rng::tag::DATA]));
    let mut seen = HashSet::new();
    let mut means = Vec::with_capacity(classes);
    while means.len() < classes {
        let v: Vec<u8> = (0..dim).map(|_| rng.random_range(0..=1u8)).collect();
        if seen.insert(v.clone()) {
            means.push(v);
        }
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Input(e.to_string()))?;
    let mut data = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(mean.iter().map(|&m| m as f64 + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![labels.len(), dim], data)?, labels, classes)
}

/// Reads `dim` real columns followed by an integer label per row. A first
/// row whose fields do not all parse as numbers is treated as a header.
/// The class count is `max(label) + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Input(format!("row {row}: {e}")))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if idx == 0 && record.iter().any(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() < 2 {
            return Err(Error::Input(format!("row {row}: need at least one feature and a label")));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Input(format!(
                    "row {row}: ragged row with {} columns, expected {w}",
                    record.len()
                )))
            }
            _ => {}
        }
        let last = record.len() - 1;
        for (c, field) in record.iter().enumerate().take(last) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Input(format!("row {row}, column {}: `{field}` is not a number", c + 1)))?;
            data.push(v);
        }
        let label = &record[last];
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| Error::Input(format!("row {row}: label `{label}` is not a non-negative integer")))?,
        );
    }
    let Some(width) = width else {
        return Err(Error::Input(format!("{}: no data rows", path.display())));
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = Tensor::new(vec![labels.len(), width - 1], data)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Dataset::new(features, labels, classes.max(1))
}

/// Writes the format accepted by [`load_csv`]; floats use shortest
/// round-trip formatting so a reload is exact.
pub fn write_csv(ds: &Dataset, mut out: impl Write) -> Result<()> {
    let mut line = String::new();
    for r in 0..ds.len() {
        line.clear();
        for v in ds.features.row(r) {
            line.push_str(&format!("{v:?},"));
        }
        line.push_str(&ds.labels[r].to_string());
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    LabelSkew { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub client_count: usize,
    pub seed: u64,
}

/// One client's data. Index lists refer to rows of the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub train: DataBatch,
    pub eval: DataBatch,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

/// Splits the dataset into disjoint per-client allocations, each divided
/// into 80% train and 20% eval (at least one of each).
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    let clients = spec.client_count;
    if clients < 2 {
        return Err(Error::Input("client_count must be at least 2".into()));
    }
    if ds.len() < 2 * clients {
        return Err(Error::Input(format!(
            "{} examples cannot give {clients} clients one train and one eval example each",
            ds.len()
        )));
    }
    let mut rng = rng_from(derive_seed(spec.seed, &[crate::rng::tag::PARTITION]));
    let mut alloc: Vec<Vec<usize>> = match spec.kind {
        PartitionKind::Iid => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng);
            let base = ds.len() / clients;
            let extra = ds.len() % clients;
            let mut out = Vec::with_capacity(clients);
            let mut start = 0;
            for c in 0..clients {
                let len = base + usize::from(c < extra);
                out.push(idx[start..start + len].to_vec());
                start += len;
            }
            out
        }
        PartitionKind::LabelSkew { alpha } => {
            if !(alpha > 0.0) || !alpha.is_finite() {
                return Err(Error::Input(format!("skew_alpha {alpha} must be positive and finite")));
            }
            dirichlet_alloc(ds, clients, alpha, &mut rng)?
        }
    };
    rebalance(&mut alloc);

    alloc
        .into_iter()
        .map(|mut idx| {
            idx.shuffle(&mut rng);
            let n_eval = (idx.len() / EVAL_FRACTION_DENOM).max(1);
            let eval_indices = idx[..n_eval].to_vec();
            let train_indices = idx[n_eval..].to_vec();
            Ok(ClientShard {
                train: ds.batch(&train_indices)?,
                eval: ds.batch(&eval_indices)?,
                train_indices,
                eval_indices,
            })
        })
        .collect()
}

/// Per class, draws client proportions from a symmetric Dirichlet and cuts
/// the class's (shuffled) examples at the cumulative proportions.
fn dirichlet_alloc(ds: &Dataset, clients: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Input(e.to_string()))?;
    let mut alloc = vec![Vec::new(); clients];
    for class in 0..ds.class_count {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let mut draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            // every gamma draw underflowed: fall back to an even split
            draws.iter_mut().for_each(|d| *d = 1.0);
        }
        let total: f64 = draws.iter().sum();
        let n = members.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (c, d) in draws.iter().enumerate() {
            cum += d / total;
            let end = if c + 1 == clients { n } else { ((cum * n as f64).round() as usize).min(n) };
            let end = end.max(start);
            alloc[c].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for a in &mut alloc {
        a.sort_unstable();
    }
    Ok(alloc)
}

/// Moves examples from the largest allocations until every client holds at
/// least two (one train, one eval).
fn rebalance(alloc: &mut [Vec<usize>]) {
    loop {
        let Some(small) = (0..alloc.len()).find(|&c| alloc[c].len() < 2) else {
            return;
        };
        let big = (0..alloc.len())
            .max_by_key(|&c| (alloc[c].len(), std::cmp::Reverse(c)))
            .expect("non-empty");
        let moved = alloc[big].pop().expect("largest allocation has spare examples");
        alloc[small].push(moved);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synth_blobs(3, 4, 5, 25, 0.3).unwrap();
        let b = synth_blobs(3, 4, 5, 25, 0.3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label_histogram(), vec![25; 4]);
        assert_ne!(a, synth_blobs(4, 4, 5, 25, 0.3).unwrap());
        assert!(synth_blobs(1, 1, 5, 3, 0.1).is_err());
        assert!(synth_blobs(1, 5, 2, 3, 0.1).is_err());
    }

    #[test]
    fn separable_limit_nearest_mean_is_perfect() {
        let ds = synth_blobs(9, 6, 4, 30, 1e-9).unwrap();
        let dim = ds.dim();
        let mut means = vec![vec![0.0; dim]; ds.class_count];
        for (r, &l) in ds.labels.iter().enumerate() {
            for (m, v) in means[l].iter_mut().zip(ds.features.row(r)) {
                *m += v / 30.0;
            }
        }
        for (r, &l) in ds.labels.iter().enumerate() {
            let row = ds.features.row(r);
            let nearest = (0..ds.class_count)
                .min_by(|&a, &b| {
                    let da: f64 = means[a].iter().zip(row).map(|(m, v)| (m - v).powi(2)).sum();
                    let db: f64 = means[b].iter().zip(row).map(|(m, v)| (m - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, l);
        }
    }

    #[test]
    fn iid_eighty_twenty() {
        let ds = synth_blobs(1, 2, 3, 50, 0.5).unwrap();
        let spec = PartitionSpec { kind: PartitionKind::Iid, client_count: 2, seed: 7 };
        let shards = partition(&ds, &spec).unwrap();
        for s in &shards {
            assert_eq!(s.train.len(), 40);
            assert_eq!(s.eval.len(), 10);
        }
    }

    #[test]
    fn too_few_examples() {
        let ds = synth_blobs(1, 2, 3, 2, 0.5).unwrap();
        let spec = PartitionSpec { kind: PartitionKind::Iid, client_count: 3, seed: 7 };
        assert!(matches!(partition(&ds, &spec), Err(Error::Input(_))));
    }

    #[test]
    fn extreme_skew_still_gives_every_client_data() {
        let ds = synth_blobs(2, 3, 3, 20, 0.5).unwrap();
        let spec = PartitionSpec { kind: PartitionKind::LabelSkew { alpha: 0.01 }, client_count: 10, seed: 1 };
        for s in partition(&ds, &spec).unwrap() {
            assert!(!s.train.is_empty() && !s.eval.is_empty());
        }
    }
}
