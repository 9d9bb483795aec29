//! Keep-ratio, estimator variance and transmission bound for sparsified
//! gradients: a hand-sized vector, a decaying spectrum, and a real gradient
//! taken from a short federated run.

use invdrop::cli::{analyze_variance, ExperimentConfig};
use invdrop::sim::Simulation;
use invdrop::variance::{check_bound, keep_probs, solve_r};

fn main() -> invdrop::Result<()> {
    let g = [2.0, 1.0, 1.0, 1.0];
    let kr = solve_r(&g, 1, 0.5)?;
    println!("g = {g:?}, k = 1, eps = 0.5: r = {:.4}, p = {:?}", kr.r, keep_probs(&g, 1, kr.r)?);
    let b = check_bound(&g, 1, 0.5)?;
    println!("  expected transmitted {:.3} vs k(1+eps) = {} -> holds: {}", b.lhs, b.rhs, b.holds);

    let decaying: Vec<f64> = (0..1000).map(|i| 0.8f64.powi(i)).collect();
    for k in [1, 5, 10, 20] {
        let b = check_bound(&decaying, k, 0.5)?;
        println!("decaying, k = {k:2}: {:.2} vs {:.1} -> {}", b.lhs, b.rhs, b.holds);
    }

    let mut cfg = ExperimentConfig::from_toml(include_str!("../configs/reference.toml"))?;
    cfg.rounds = 5;
    let mut sim = Simulation::new(cfg.sim_config(0)?)?;
    for _ in 0..cfg.rounds {
        sim.step()?;
    }
    let grad = sim.global_gradient()?;
    for k in [10, 50, 200] {
        let rep = analyze_variance(&grad, k, 0.5, 2000, 1)?;
        println!(
            "model gradient (m = {}), k = {k:3}: r = {:.2}, E[sent] = {:.1} vs {:.1}, variance x{:.3}, MC rel err {:.1e}",
            rep.m,
            rep.r,
            rep.bound_lhs,
            rep.bound_rhs,
            rep.estimator_variance / rep.dense_second_moment,
            rep.monte_carlo.map_or(0.0, |m| m.relative_error)
        );
    }
    Ok(())
}
