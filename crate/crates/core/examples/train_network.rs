//! Train a small MLP on synthetic blobs with plain minibatch SGD.
//!
//! ```text
//! cargo run --example train_network
//! ```

use invdrop::data::synth_blobs;
use invdrop::nn::{evaluate, local_train, Hyperparams, Model, ModelShape};

fn main() -> invdrop::Result<()> {
    let ds = synth_blobs(7, 4, 8, 200, 0.5)?;
    let (train_rows, test_rows): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|i| i % 5 != 0);
    let train = ds.batch(&train_rows)?;
    let test = ds.batch(&test_rows)?;

    let shape = ModelShape::from_parts(ds.dim(), &[32, 32], ds.class_count)?;
    let mut model = Model::init(&shape, 0);
    println!("{} parameters, layer widths {:?}", shape.param_count(), shape.sizes());

    for epoch in 1..=10 {
        let hp = Hyperparams { learning_rate: 0.1, batch_size: 16, local_epochs: 1, seed: epoch };
        let out = local_train(&model, &train, &hp)?;
        model = out.model;
        let (loss, acc) = evaluate(&model, &test)?;
        println!("epoch {epoch:2}  train loss {:.4}  test loss {loss:.4}  test acc {:.1}%", out.train_loss, 100.0 * acc);
    }
    Ok(())
}
