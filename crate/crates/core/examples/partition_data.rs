//! IID versus Dirichlet label-skewed client splits.

use invdrop::data::{partition, synth_blobs, PartitionKind, PartitionSpec};

fn main() -> invdrop::Result<()> {
    let ds = synth_blobs(3, 5, 6, 100, 0.5)?;
    for kind in [
        PartitionKind::Iid,
        PartitionKind::LabelSkew { alpha: 10.0 },
        PartitionKind::LabelSkew { alpha: 0.3 },
    ] {
        println!("{kind:?}");
        let shards = partition(&ds, &PartitionSpec { kind, client_count: 6, seed: 1 })?;
        for (c, s) in shards.iter().enumerate() {
            let mut hist = vec![0; ds.class_count];
            for &i in s.train_indices.iter().chain(&s.eval_indices) {
                hist[ds.labels[i]] += 1;
            }
            println!("  client {c}: train {:3}, eval {:2}, labels {hist:?}", s.train.len(), s.eval.len());
        }
    }
    Ok(())
}
