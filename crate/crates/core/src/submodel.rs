//! Neuron masks, sub-model extraction and coverage-weighted aggregation of
//! heterogeneous client updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenseLayer, Model, ModelShape};
use crate::tensor::Tensor;

/// Kept neuron indices for every hidden layer. Inputs and the output layer
/// are never masked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronMask {
    kept: Vec<Vec<usize>>,
}

impl NeuronMask {
    /// Builds a mask; each layer's indices must be strictly increasing and
    /// non-empty.
    pub fn new(kept: Vec<Vec<usize>>) -> Result<Self> {
        for (j, layer) in kept.iter().enumerate() {
            if layer.is_empty() {
                return Err(Error::Mask(format!("hidden layer {j} keeps no neurons")));
            }
            if layer.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Mask(format!(
                    "hidden layer {j} indices must be strictly increasing"
                )));
            }
        }
        Ok(Self { kept })
    }

    pub fn full(shape: &ModelShape) -> Self {
        Self {
            kept: shape.hidden().iter().map(|&k| (0..k).collect()).collect(),
        }
    }

    pub fn kept(&self) -> &[Vec<usize>] {
        &self.kept
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.kept.iter().map(Vec::len).collect()
    }

    pub fn is_full(&self, shape: &ModelShape) -> bool {
        self.kept_counts() == shape.hidden()
    }

    pub fn validate(&self, shape: &ModelShape) -> Result<()> {
        let hidden = shape.hidden();
        if self.kept.len() != hidden.len() {
            return Err(Error::Mask(format!(
                "mask covers {} hidden layers, model has {}",
                self.kept.len(),
                hidden.len()
            )));
        }
        for (j, (layer, &k)) in self.kept.iter().zip(hidden).enumerate() {
            if let Some(&bad) = layer.iter().find(|&&i| i >= k) {
                return Err(Error::Mask(format!(
                    "neuron {bad} out of range for hidden layer {j} of width {k}"
                )));
            }
        }
        Ok(())
    }

    /// Global row indices kept in dense layer `j` (all rows for the output).
    fn rows(&self, shape: &ModelShape, j: usize) -> Vec<usize> {
        match self.kept.get(j) {
            Some(k) => k.clone(),
            None => (0..shape.sizes()[j + 1]).collect(),
        }
    }

    /// Global column indices kept in dense layer `j` (all inputs for layer 0).
    fn cols(&self, shape: &ModelShape, j: usize) -> Vec<usize> {
        if j == 0 {
            (0..shape.input_dim()).collect()
        } else {
            self.kept[j - 1].clone()
        }
    }

    /// Widths of the sub-model induced by this mask.
    pub fn sub_shape(&self, shape: &ModelShape) -> ModelShape {
        let mut sizes = vec![shape.input_dim()];
        sizes.extend(self.kept_counts());
        sizes.push(shape.classes());
        ModelShape::new(sizes).expect("mask layers are non-empty")
    }
}

/// Parameters of a sub-model; dimensions follow the mask that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubModel(pub Model);

impl SubModel {
    pub fn model(&self) -> &Model {
        &self.0
    }

    pub fn into_model(self) -> Model {
        self.0
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateUpdate {
    pub client_id: usize,
    pub mask: NeuronMask,
    pub params: SubModel,
    pub n_examples: usize,
}

/// Copy the kept rows and columns of `global` into a smaller model.
pub fn extract_submodel(global: &Model, mask: &NeuronMask) -> Result<SubModel> {
    let shape = global.shape();
    mask.validate(&shape)?;
    let mut layers = Vec::with_capacity(global.layers.len());
    for (j, layer) in global.layers.iter().enumerate() {
        let rows = mask.rows(&shape, j);
        let cols = mask.cols(&shape, j);
        let mut w = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            let src = layer.weights.row(r);
            w.extend(cols.iter().map(|&c| src[c]));
        }
        let b = rows.iter().map(|&r| layer.biases.data()[r]).collect();
        layers.push(DenseLayer::new(
            Tensor::new(vec![rows.len(), cols.len()], w)?,
            Tensor::new(vec![rows.len()], b)?,
        )?);
    }
    Ok(SubModel(Model::new(layers)?))
}

/// Sub-model parameter count over the global parameter count.
pub fn cost_fraction(shape: &ModelShape, mask: &NeuronMask) -> Result<f64> {
    mask.validate(shape)?;
    Ok(mask.sub_shape(shape).param_count() as f64 / shape.param_count() as f64)
}

fn check_update(shape: &ModelShape, u: &CoordinateUpdate) -> Result<()> {
    u.mask
        .validate(shape)
        .map_err(|e| Error::Aggregation(format!("client {}: {e}", u.client_id)))?;
    if u.params.0.shape() != u.mask.sub_shape(shape) {
        return Err(Error::Aggregation(format!(
            "client {}: parameters have shape {:?}, mask implies {:?}",
            u.client_id,
            u.params.0.shape().sizes(),
            u.mask.sub_shape(shape).sizes()
        )));
    }
    if u.n_examples == 0 {
        return Err(Error::Aggregation(format!("client {} reports zero examples", u.client_id)));
    }
    Ok(())
}

/// Example-weighted mean per global coordinate over the clients whose mask
/// covers it. Uncovered coordinates keep their global value. Clients are
/// summed in ascending id order, so the result does not depend on the order
/// of `updates`.
pub fn aggregate(global: &Model, updates: &[CoordinateUpdate]) -> Result<Model> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no updates to aggregate".into()));
    }
    let shape = global.shape();
    let mut order: Vec<&CoordinateUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    if order.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Aggregation("duplicate client id among updates".into()));
    }
    for u in &order {
        check_update(&shape, u)?;
    }

    // Pass 1: covering example count per coordinate.
    let mut counts = global.zeros_like();
    for u in &order {
        scatter(&shape, u, &mut counts, |slot, _| *slot += u.n_examples as f64);
    }
    // Pass 2: weighted sum with per-coordinate normalized weights.
    let mut sums = global.zeros_like();
    let count_flat = counts.flatten();
    for u in &order {
        let n = u.n_examples as f64;
        scatter_indexed(&shape, u, &mut sums, |slot, flat, value| {
            *slot += (n / count_flat[flat]) * value;
        });
    }

    let mut out = global.clone();
    for ((o, s), c) in out.params_mut().zip(sums.flatten()).zip(count_flat) {
        if c > 0.0 {
            *o = s;
        }
    }
    Ok(out)
}

/// Start of each layer in `Model::flatten` order (weights, then biases).
fn flat_offsets(shape: &ModelShape) -> Vec<usize> {
    let mut offs = Vec::with_capacity(shape.num_layers());
    let mut acc = 0;
    for w in shape.sizes().windows(2) {
        offs.push(acc);
        acc += w[0] * w[1] + w[1];
    }
    offs
}

fn scatter(shape: &ModelShape, u: &CoordinateUpdate, target: &mut Model, mut f: impl FnMut(&mut f64, f64)) {
    scatter_indexed(shape, u, target, |slot, _, v| f(slot, v));
}

fn scatter_indexed(
    shape: &ModelShape,
    u: &CoordinateUpdate,
    target: &mut Model,
    mut f: impl FnMut(&mut f64, usize, f64),
) {
    let offs = flat_offsets(shape);
    for (j, sub) in u.params.0.layers.iter().enumerate() {
        let rows = u.mask.rows(shape, j);
        let cols = u.mask.cols(shape, j);
        let in_u = shape.sizes()[j];
        let out_u = shape.sizes()[j + 1];
        let tgt = &mut target.layers[j];
        for (sr, &gr) in rows.iter().enumerate() {
            let src = sub.weights.row(sr);
            for (sc, &gc) in cols.iter().enumerate() {
                let flat = offs[j] + gr * in_u + gc;
                f(&mut tgt.weights.data_mut()[gr * in_u + gc], flat, src[sc]);
            }
            let flat = offs[j] + out_u * in_u + gr;
            f(&mut tgt.biases.data_mut()[gr], flat, sub.biases.data()[sr]);
        }
    }
}
