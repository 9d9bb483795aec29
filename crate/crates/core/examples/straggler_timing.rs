//! Profile a heterogeneous federation, size the straggler's sub-model, and
//! show the simulated per-round times before and after.

use invdrop::cli::ExperimentConfig;
use invdrop::sim::{choose_rate, profile_stragglers, required_speedup, Simulation};

fn main() -> invdrop::Result<()> {
    let cfg = ExperimentConfig::from_toml(include_str!("../configs/reference.toml"))?;
    let sim_cfg = cfg.sim_config(0)?;

    let times: Vec<(usize, f64)> = sim_cfg.clients.iter().map(|c| (c.id, c.base_time_s)).collect();
    let profile = profile_stragglers(&times, sim_cfg.stragglers)?;
    let slow = times.iter().find(|t| t.0 == profile.straggler_ids[0]).unwrap().1;
    let choice = choose_rate(slow, profile.target_time_s, &sim_cfg.shape, &sim_cfg.strategy)?;
    println!(
        "straggler {:?}: {slow}s vs target {}s, speedup {:.2}x -> r = {} (target met: {})",
        profile.straggler_ids,
        profile.target_time_s,
        required_speedup(slow, profile.target_time_s)?,
        choice.rate,
        choice.met_target
    );

    let mut sim = Simulation::new(sim_cfg)?;
    for _ in 0..5 {
        let rec = sim.step()?;
        println!(
            "round {}: round time {:6.2}s, straggler {:6.2}s, accuracy {:.1}%",
            rec.round,
            rec.round_time_s,
            rec.straggler_time_s.unwrap_or(0.0),
            100.0 * rec.eval_accuracy
        );
    }
    Ok(())
}
