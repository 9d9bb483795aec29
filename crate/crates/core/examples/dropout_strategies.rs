//! Compare how the three dropout strategies pick neurons, and trace the
//! drop-threshold controller on a synthetic stream of update statistics.

use invdrop::dropout::{
    invariant_mask, majority_invariant, ordered_mask, random_mask, update_thresholds, ClientStats, DropoutRate,
    ThresholdState, UpdateStats,
};
use invdrop::nn::ModelShape;

fn main() -> invdrop::Result<()> {
    let shape = ModelShape::new(vec![4, 12, 4])?;
    let rate = DropoutRate::new(0.5)?;

    // Three clients; neurons 3, 5, 7, 9, 10 and 11 barely move.
    let base: Vec<f64> = (0..12).map(|i| if [3, 5, 7, 9, 10, 11].contains(&i) { 0.02 + 0.004 * i as f64 } else { 0.6 }).collect();
    let stats = UpdateStats {
        clients: (0..3)
            .map(|c| ClientStats { client_id: c, layers: vec![base.iter().map(|v| v * (1.0 + 0.1 * c as f64)).collect()] })
            .collect(),
    };

    let mut state = ThresholdState::from_first_round(&stats, 2, 1.1)?;
    let needed = rate.drop_counts(&shape)?;
    println!("need {} invariant neurons, initial threshold {:.4}", needed[0], state.thresholds[0]);
    for round in 2..=30 {
        let flagged = majority_invariant(&stats, &state.thresholds)?[0].iter().filter(|&&f| f).count();
        println!("round {round:2}: threshold {:.4}, warmup {}, {flagged} invariant", state.thresholds[0], state.warmup_remaining);
        if flagged >= needed[0] {
            break;
        }
        state = update_thresholds(&state, &stats, &needed)?;
    }

    println!("ordered   keeps {:?}", ordered_mask(&shape, rate)?.kept()[0]);
    println!("random    keeps {:?}", random_mask(&shape, rate, 42)?.kept()[0]);
    println!("invariant keeps {:?}", invariant_mask(&state, &stats, &shape, rate)?.kept()[0]);
    Ok(())
}
