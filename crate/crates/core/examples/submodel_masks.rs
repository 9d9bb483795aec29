//! Carve sub-models out of a global model, price them, and merge partial
//! updates back with coverage-weighted averaging.

use invdrop::dropout::{ordered_mask, DropoutRate};
use invdrop::nn::{Model, ModelShape};
use invdrop::submodel::{aggregate, cost_fraction, extract_submodel, CoordinateUpdate, NeuronMask, SubModel};

fn main() -> invdrop::Result<()> {
    let shape = ModelShape::new(vec![6, 10, 8, 3])?;
    let global = Model::init(&shape, 1);

    for r in [1.0, 0.75, 0.5, 0.25] {
        let mask = ordered_mask(&shape, DropoutRate::new(r)?)?;
        println!(
            "r = {r:4}: keeps {:?}, sub-model {:?}, cost {:.3}",
            mask.kept_counts(),
            mask.sub_shape(&shape).sizes(),
            cost_fraction(&shape, &mask)?
        );
    }

    // One full client and one client that trained only the even neurons.
    let partial = NeuronMask::new(vec![(0..10).step_by(2).collect(), (0..8).step_by(2).collect()])?;
    let shift = |m: &Model, delta: f64| {
        let mut m = m.clone();
        for l in &mut m.layers {
            l.weights.data_mut().iter_mut().for_each(|w| *w += delta);
        }
        m
    };
    let full_update = CoordinateUpdate {
        client_id: 0,
        mask: NeuronMask::full(&shape),
        params: SubModel(shift(&global, 1.0)),
        n_examples: 30,
    };
    let sub = extract_submodel(&global, &partial)?;
    let partial_update = CoordinateUpdate {
        client_id: 1,
        mask: partial,
        params: SubModel(shift(sub.model(), -1.0)),
        n_examples: 10,
    };
    let merged = aggregate(&global, &[full_update, partial_update])?;

    // Neuron 0 of layer 0 is covered by both clients (30·(+1) + 10·(−1)) / 40,
    // neuron 1 only by the full client.
    let w = |m: &Model, row: usize| m.layers[0].weights.row(row)[0];
    println!("layer 0 neuron 0 weight moved by {:+.3}", w(&merged, 0) - w(&global, 0));
    println!("layer 0 neuron 1 weight moved by {:+.3}", w(&merged, 1) - w(&global, 1));
    Ok(())
}
